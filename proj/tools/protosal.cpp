#include "protosal/pipeline.hpp"

int main(int argc, char** argv) { return protosal::run_cli(argc, argv); }
