#include "btlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace btlab::lm {

using nlohmann::json;
using nlohmann::ordered_json;

void to_json(ordered_json& j, const ModelConfig& cfg) {
    j = ordered_json{{"n_layers", cfg.n_layers},   {"d_model", cfg.d_model},
                     {"n_heads", cfg.n_heads},     {"d_ff", cfg.d_ff},
                     {"context_len", cfg.context_len}, {"dropout", cfg.dropout},
                     {"seed", cfg.seed},           {"vocab_size", cfg.vocab_size}};
}

void from_json(const json& j, ModelConfig& cfg) {
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.d_ff = j.value("d_ff", cfg.d_ff);
    cfg.context_len = j.value("context_len", cfg.context_len);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
}

void save_checkpoint(const Model& model, const Vocab& vocab, const std::string& path) {
    ordered_json header;
    ordered_json cfg_json;
    to_json(cfg_json, model.config());
    header["config"] = cfg_json;
    header["vocab"] = vocab.symbols();

    ordered_json tensor_dir = ordered_json::array();
    const auto names = Params::tensor_names(model.config().n_layers);
    const auto tensors = model.params().tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        tensor_dir.push_back(ordered_json{{"name", names[i]},
                                          {"rows", tensors[i]->rows()},
                                          {"cols", tensors[i]->cols()}});
    }
    header["tensors"] = std::move(tensor_dir);

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open checkpoint for writing: " + path);
    }
    out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    uint64_t header_len = header_str.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) {
        len_bytes[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const Mat* m : tensors) {
        out.write(reinterpret_cast<const char*>(m->data()),
                  static_cast<std::streamsize>(sizeof(double) * m->size()));
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint: " + path);
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint: " + path);
    }
    std::string magic(kCheckpointMagic.size(), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != kCheckpointMagic) {
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    }
    unsigned char len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) {
        header_len |= static_cast<uint64_t>(len_bytes[i]) << (8 * i);
    }
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw std::runtime_error("truncated checkpoint header: " + path);
    }
    const json header = json::parse(header_str);

    ModelConfig cfg;
    from_json(header.at("config"), cfg);
    auto vocab = std::make_unique<Vocab>(header.at("vocab").get<std::vector<std::string>>());
    auto model = std::make_unique<Model>(cfg);

    const auto names = Params::tensor_names(cfg.n_layers);
    const auto& dir = header.at("tensors");
    auto tensors = model->params().tensors();
    if (dir.size() != tensors.size()) {
        throw std::runtime_error("checkpoint tensor directory does not match the architecture");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& entry = dir[i];
        if (entry.at("name").get<std::string>() != names[i] ||
            entry.at("rows").get<Eigen::Index>() != tensors[i]->rows() ||
            entry.at("cols").get<Eigen::Index>() != tensors[i]->cols()) {
            throw std::runtime_error("checkpoint tensor mismatch at " + names[i]);
        }
        in.read(reinterpret_cast<char*>(tensors[i]->data()),
                static_cast<std::streamsize>(sizeof(double) * tensors[i]->size()));
    }
    if (!in) {
        throw std::runtime_error("truncated checkpoint payload: " + path);
    }
    return {std::move(model), std::move(vocab)};
}

}  // namespace btlab::lm
