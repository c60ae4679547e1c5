#include "toco/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

namespace toco {

namespace {

constexpr const char* kFormat = "toco-archive";
constexpr int kVersion = 1;

std::filesystem::path with_ext(const std::filesystem::path& prefix, const char* ext) {
    return std::filesystem::path(prefix.string() + ext);
}

void put_le(std::vector<char>& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xffu));
}

float get_le(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& prefix, ToCoModel<float>& model, const TrainConfig& cfg,
                     int iteration) {
    nlohmann::json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kVersion;
    manifest["iteration"] = iteration;
    manifest["config"] = cfg;
    manifest["vit"] = cfg.vit;
    std::vector<char> blob;
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& [name, p] : model.named_params()) {
        const std::size_t offset = blob.size();
        for (Eigen::Index i = 0; i < p->value.size(); ++i) put_le(blob, p->value.data()[i]);
        tensors.push_back({{"name", name}, {"shape", {p->value.rows(), p->value.cols()}}, {"offset", offset}});
    }
    manifest["tensors"] = tensors;
    manifest["bytes"] = blob.size();

    const auto bin = with_ext(prefix, ".bin");
    const auto json = with_ext(prefix, ".json");
    {
        std::ofstream out(bin, std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + bin.string());
        out.write(blob.data(), std::streamsize(blob.size()));
        if (!out) throw CheckpointError("short write on " + bin.string());
    }
    std::ofstream out(json);
    if (!out) throw CheckpointError("cannot write " + json.string());
    out << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& prefix) {
    const auto bin = with_ext(prefix, ".bin");
    const auto json = with_ext(prefix, ".json");
    std::ifstream jin(json);
    if (!jin) throw CheckpointError("cannot open manifest " + json.string());
    nlohmann::json manifest;
    try {
        jin >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed manifest " + json.string() + ": " + e.what());
    }
    if (manifest.value("format", std::string()) != kFormat || manifest.value("version", 0) != kVersion) {
        throw CheckpointError(json.string() + ": unsupported archive format");
    }

    std::ifstream bin_in(bin, std::ios::binary);
    if (!bin_in) throw CheckpointError("cannot open tensor archive " + bin.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin_in)), std::istreambuf_iterator<char>());
    if (blob.size() != manifest.value("bytes", std::size_t(0))) {
        throw CheckpointError(bin.string() + ": size " + std::to_string(blob.size()) + " does not match manifest");
    }

    LoadedCheckpoint out;
    try {
        out.config = desk_preset();
        from_json(manifest.at("config"), out.config);
        VitConfig vit = manifest.at("vit").get<VitConfig>();
        if (!(vit == out.config.vit)) throw CheckpointError(json.string() + ": backbone config disagrees with run config");
        out.iteration = manifest.value("iteration", 0);
        std::mt19937_64 rng(0);
        out.model = ToCoModel<float>::init(out.config, rng);

        std::map<std::string, Param<float>*> slots;
        for (auto& [name, p] : out.model.named_params()) slots.emplace(name, p);
        for (const auto& t : manifest.at("tensors")) {
            const std::string name = t.at("name").get<std::string>();
            auto it = slots.find(name);
            if (it == slots.end()) throw CheckpointError(json.string() + ": unexpected tensor " + name);
            Param<float>& p = *it->second;
            const auto rows = t.at("shape").at(0).get<Eigen::Index>();
            const auto cols = t.at("shape").at(1).get<Eigen::Index>();
            if (rows != p.value.rows() || cols != p.value.cols()) {
                throw CheckpointError(json.string() + ": tensor " + name + " has shape " + std::to_string(rows) + "x" +
                                      std::to_string(cols) + ", model expects " + std::to_string(p.value.rows()) +
                                      "x" + std::to_string(p.value.cols()));
            }
            const auto offset = t.at("offset").get<std::size_t>();
            if (offset + std::size_t(rows * cols) * 4 > blob.size()) {
                throw CheckpointError(bin.string() + ": tensor " + name + " runs past end of archive");
            }
            for (Eigen::Index i = 0; i < rows * cols; ++i) p.value.data()[i] = get_le(blob.data() + offset + 4 * i);
            p.zero_grad();
            slots.erase(it);
        }
        if (!slots.empty()) throw CheckpointError(json.string() + ": missing tensor " + slots.begin()->first);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(json.string() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(json.string() + ": invalid config: " + e.what());
    }
    return out;
}

}  // namespace toco
