#include "protosal/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "protosal/binio.hpp"
#include "protosal/common.hpp"

namespace protosal {

namespace {
constexpr char kMagic[9] = "PSCKPT01";
}

std::string topology_descriptor(const Graph& g) {
    std::ostringstream os;
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        const auto& n = g.node(static_cast<int>(i));
        os << op_kind_name(n.kind) << '(';
        for (std::size_t j = 0; j < n.sample_shape.size(); ++j)
            os << (j ? "x" : "") << n.sample_shape[j];
        if (n.kh || n.kw) os << ",k" << n.kh << "x" << n.kw;
        if (n.stride != 1) os << ",s" << n.stride;
        if (n.pad) os << ",p" << n.pad;
        if (n.fraction != 0.0) os << ",f" << n.fraction;
        if (n.eps != 0.0) os << ",e" << n.eps;
        os << ")<";
        for (std::size_t j = 0; j < n.inputs.size(); ++j)
            os << (j ? "," : "") << n.inputs[j];
        os << ';';
    }
    return os.str();
}

void save_checkpoint(const std::string& path, const Graph& g) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    binio::write_bytes(f, kMagic, 8);
    binio::write_string(f, topology_descriptor(g));
    binio::write_u32(f, static_cast<std::uint32_t>(g.params().size()));
    for (const auto& p : g.params()) {
        binio::write_string(f, p.name);
        unsigned char flags = (p.trainable ? 1 : 0) | (p.is_buffer ? 2 : 0);
        binio::write_bytes(f, &flags, 1);
        binio::write_u32(f, static_cast<std::uint32_t>(p.value.shape.size()));
        for (auto d : p.value.shape) binio::write_i64(f, d);
        binio::write_f32_array(f, p.value.data.data(), p.value.data.size());
    }
    if (!f) throw Error("write failed: " + path);
}

void load_checkpoint(const std::string& path, Graph& g) {
    if (!std::filesystem::exists(path))
        throw MissingPrerequisiteError("checkpoint not found: " + path);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open: " + path);
    binio::expect_magic(f, kMagic, "checkpoint");
    std::string topo = binio::read_string(f);
    std::string want = topology_descriptor(g);
    if (topo != want)
        throw Error("checkpoint topology mismatch\n  file:  " + topo +
                    "\n  graph: " + want);
    std::uint32_t count = binio::read_u32(f);
    if (count != g.params().size())
        throw Error("checkpoint holds " + std::to_string(count) + " params, graph has " +
                    std::to_string(g.params().size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = binio::read_string(f);
        unsigned char flags;
        binio::read_bytes(f, &flags, 1);
        std::uint32_t ndim = binio::read_u32(f);
        std::vector<std::int64_t> shape(ndim);
        for (auto& d : shape) d = binio::read_i64(f);
        ParamT<float>* p = g.find_param(name);
        if (!p) throw Error("checkpoint param not in graph: " + name);
        if (p->value.shape != shape)
            throw Error("shape mismatch for " + name + ": file " +
                        TensorT<float>(shape).shape_str() + " vs graph " +
                        p->value.shape_str());
        binio::read_f32_array(f, p->value.data.data(), p->value.data.size());
    }
    g.invalidate();
}

}  // namespace protosal
