#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "difflab/model.hpp"

namespace difflab {

namespace {

constexpr char kMagic[8] = {'D', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

std::vector<uint64_t> tensor_shape(const std::string& name, const ModelConfig& cfg) {
    const uint64_t d = cfg.embed_dim;
    const uint64_t f = 4 * d;
    const uint64_t v = cfg.vocab_size;
    auto suffix = name.substr(name.find('.') == std::string::npos ? 0 : name.find('.') + 1);
    if (name == "tok_emb") return {v, d};
    if (name == "pos_emb") return {cfg.max_seq_len, d};
    if (name == "out_w") return {d, v};
    if (name == "out_b") return {v};
    if (suffix == "qkv_w") return {d, 3 * d};
    if (suffix == "qkv_b") return {3 * d};
    if (suffix == "proj_w") return {d, d};
    if (suffix == "fc_w") return {d, f};
    if (suffix == "fc_b") return {f};
    if (suffix == "fc2_w") return {f, d};
    // ln gains/biases, proj_b, fc2_b
    return {d};
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);

    const ModelConfig& cfg = model.config();
    nlohmann::ordered_json header;
    header["format_version"] = kFormatVersion;
    header["scalar"] = "float64";
    header["byte_order"] = "little";
    header["vocab_size"] = cfg.vocab_size;
    header["embed_dim"] = cfg.embed_dim;
    header["num_layers"] = cfg.num_layers;
    header["num_heads"] = cfg.num_heads;
    header["max_seq_len"] = cfg.max_seq_len;
    header["block_size"] = cfg.block_size;
    header["rng_seed"] = cfg.rng_seed;
    header["tied_embeddings"] = false;
    const std::string header_str = header.dump();

    out.write(kMagic, 8);
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<uint32_t>(header_str.size()));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    uint32_t count = 0;
    model.params().for_each_tensor(
        [&](const std::string&, const std::vector<Real>&) { ++count; });
    write_u32(out, count);

    model.params().for_each_tensor([&](const std::string& name, const std::vector<Real>& t) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        auto shape = tensor_shape(name, cfg);
        uint64_t n = 1;
        for (uint64_t s : shape) n *= s;
        if (n != t.size()) throw IoError("checkpoint: shape mismatch for tensor " + name);
        write_u32(out, static_cast<uint32_t>(shape.size()));
        for (uint64_t s : shape) write_u64(out, s);
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(Real)));
    });
    if (!out) throw IoError("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);

    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    const uint32_t version = read_u32(in);
    if (version != kFormatVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const uint32_t hlen = read_u32(in);
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), hlen);
    nlohmann::json header = nlohmann::json::parse(hstr);
    if (header.at("scalar").get<std::string>() != "float64" ||
        header.at("byte_order").get<std::string>() != "little") {
        throw IoError("checkpoint scalar/byte-order not supported");
    }

    ModelConfig cfg;
    cfg.vocab_size = header.at("vocab_size").get<size_t>();
    cfg.embed_dim = header.at("embed_dim").get<size_t>();
    cfg.num_layers = header.at("num_layers").get<size_t>();
    cfg.num_heads = header.at("num_heads").get<size_t>();
    cfg.max_seq_len = header.at("max_seq_len").get<size_t>();
    cfg.block_size = header.at("block_size").get<size_t>();
    cfg.rng_seed = header.at("rng_seed").get<uint64_t>();

    Model model(cfg);
    std::map<std::string, std::vector<Real>*> slots;
    model.params().for_each_tensor(
        [&](const std::string& name, std::vector<Real>& t) { slots[name] = &t; });

    const uint32_t count = read_u32(in);
    size_t filled = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nlen = read_u32(in);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        const uint32_t ndim = read_u32(in);
        uint64_t n = 1;
        for (uint32_t k = 0; k < ndim; ++k) n *= read_u64(in);
        auto it = slots.find(name);
        if (it == slots.end()) throw IoError("checkpoint: unknown tensor " + name);
        if (it->second->size() != n) {
            throw IoError("checkpoint: element count mismatch for tensor " + name);
        }
        in.read(reinterpret_cast<char*>(it->second->data()),
                static_cast<std::streamsize>(n * sizeof(Real)));
        ++filled;
    }
    if (!in) throw IoError("checkpoint truncated: " + path);
    if (filled != slots.size()) throw IoError("checkpoint missing tensors: " + path);
    return model;
}

} // namespace difflab
