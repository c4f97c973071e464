#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/matrix.hpp"
#include "stable/model.hpp"

namespace stable {

// Checkpoint container: magic, format version, a JSON header describing the
// payload (config/metadata plus a tensor index), then raw little-endian
// 64-bit reals. Doubles round-trip bit-exactly.
//
//   offset 0   "MLTC"
//   offset 4   u32 format version
//   offset 8   u64 header byte length
//   offset 16  header JSON
//   then       payload doubles
constexpr uint32_t kTensorFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "container assumes little-endian");

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace detail

inline void write_tensor_container(const std::string& path, const nlohmann::json& meta,
                                   const std::map<std::string, Matrix>& tensors) {
    nlohmann::json header;
    header["format_version"] = kTensorFormatVersion;
    header["meta"] = meta;
    nlohmann::json index = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        index.push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
        offset += t.size();
    }
    header["tensors"] = index;
    const std::string htext = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    os.write("MLTC", 4);
    detail::write_u32(os, kTensorFormatVersion);
    detail::write_u64(os, htext.size());
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : tensors) {
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) fail(ErrorKind::io, "write failed for '" + path + "'");
}

struct TensorContainer {
    nlohmann::json meta;
    std::map<std::string, Matrix> tensors;
};

inline TensorContainer read_tensor_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::io, "cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MLTC", 4) != 0) {
        fail(ErrorKind::schema, "'" + path + "' is not a tensor container");
    }
    const uint32_t version = detail::read_u32(is);
    if (version != kTensorFormatVersion) {
        fail(ErrorKind::schema, "unsupported container version " + std::to_string(version));
    }
    const uint64_t hlen = detail::read_u64(is);
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) fail(ErrorKind::schema, "truncated container header");
    nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
    if (header.is_discarded()) fail(ErrorKind::schema, "container header is not valid JSON");

    TensorContainer out;
    out.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        Matrix t(entry.at("rows").get<int>(), entry.at("cols").get<int>());
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!is) fail(ErrorKind::schema, "truncated tensor payload");
        out.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

inline void save_model(const std::string& path, const Model& model) {
    nlohmann::json meta;
    meta["kind"] = "model";
    meta["config"] = {{"vocab_size", model.config.vocab_size},
                      {"embed_dim", model.config.embed_dim},
                      {"num_layers", model.config.num_layers},
                      {"num_heads", model.config.num_heads},
                      {"context_len", model.config.context_len},
                      {"pos_encoding", to_string(model.config.pos_encoding)}};
    meta["vocab"] = model.vocab.symbols();
    write_tensor_container(path, meta, model.tensors);
}

inline Model load_model(const std::string& path) {
    TensorContainer c = read_tensor_container(path);
    if (c.meta.value("kind", "") != "model") {
        fail(ErrorKind::schema, "'" + path + "' does not hold a model checkpoint");
    }
    Model model;
    const auto& cfg = c.meta.at("config");
    model.config.vocab_size = cfg.at("vocab_size").get<int>();
    model.config.embed_dim = cfg.at("embed_dim").get<int>();
    model.config.num_layers = cfg.at("num_layers").get<int>();
    model.config.num_heads = cfg.at("num_heads").get<int>();
    model.config.context_len = cfg.at("context_len").get<int>();
    model.config.pos_encoding = position_encoding_from(cfg.at("pos_encoding").get<std::string>());
    model.vocab = Vocabulary(c.meta.at("vocab").get<std::string>());
    model.tensors = std::move(c.tensors);
    validate_shapes(model);
    return model;
}

}  // namespace stable
