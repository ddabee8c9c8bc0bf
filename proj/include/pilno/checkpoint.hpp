#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "pilno/dataset.hpp"
#include "pilno/error.hpp"
#include "pilno/model.hpp"
#include "pilno/tensor.hpp"

namespace pilno {

// Checkpoint failures are distinct types so callers can tell a corrupt file
// from a file written by a different format revision from a file whose
// arrays contradict its own config manifest.
struct CheckpointError : Error {
    using Error::Error;
};
struct CheckpointParseError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointShapeError : CheckpointError {
    using CheckpointError::CheckpointError;
};

inline constexpr const char* kCheckpointFormat = "pilno-ckpt";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

// Tensor -> nested JSON arrays following the shape, depth-first.
inline nlohmann::json tensor_to_json(const Tensor& t, std::size_t dim, std::size_t offset) {
    nlohmann::json arr = nlohmann::json::array();
    const Shape& s = t.shape();
    std::size_t stride = 1;
    for (std::size_t d = dim + 1; d < s.size(); ++d) stride *= s[d];
    for (std::size_t i = 0; i < s[dim]; ++i) {
        if (dim + 1 == s.size())
            arr.push_back(t[offset + i]);
        else
            arr.push_back(tensor_to_json(t, dim + 1, offset + i * stride));
    }
    return arr;
}

inline nlohmann::json tensor_to_json(const Tensor& t) { return tensor_to_json(t, 0, 0); }

inline void fill_from_json(const nlohmann::json& j, const Shape& shape, std::size_t dim,
                           std::vector<double>& out, const std::string& name) {
    if (!j.is_array())
        throw CheckpointShapeError("checkpoint: parameter '" + name + "' is not an array at depth " +
                                   std::to_string(dim));
    if (dim >= shape.size() || j.size() != shape[dim])
        throw CheckpointShapeError("checkpoint: parameter '" + name + "' has extent " +
                                   std::to_string(j.size()) + " at depth " + std::to_string(dim) +
                                   ", manifest expects " +
                                   (dim < shape.size() ? std::to_string(shape[dim]) : std::string("none")));
    for (const auto& e : j) {
        if (dim + 1 == shape.size()) {
            if (!e.is_number())
                throw CheckpointShapeError("checkpoint: parameter '" + name + "' holds a non-number");
            out.push_back(e.get<double>());
        } else {
            fill_from_json(e, shape, dim + 1, out, name);
        }
    }
}

inline Tensor tensor_from_json(const nlohmann::json& j, const Shape& shape, const std::string& name) {
    std::vector<double> data;
    data.reserve(shape_size(shape));
    fill_from_json(j, shape, 0, data, name);
    return Tensor(shape, std::move(data));
}

} // namespace detail

inline nlohmann::json checkpoint_to_json(const ModelParams& params, const NormStats& stats) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["config"] = {{"d_v", params.config.d_v}, {"L", params.config.L}, {"M", params.config.M},
                   {"seed", params.seed}};
    j["norm_stats"] = norm_stats_to_json(stats);
    nlohmann::json p;
    const auto names = parameter_names(params.config);
    const auto tensors = collect_parameters(params);
    for (std::size_t i = 0; i < names.size(); ++i) p[names[i]] = detail::tensor_to_json(*tensors[i]);
    j["params"] = std::move(p);
    return j;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params, const NormStats& stats) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open checkpoint for writing: " + path);
    // nlohmann prints doubles with the shortest representation that parses
    // back to the same bits, so the reload is bit-exact.
    out << checkpoint_to_json(params, stats).dump(1) << '\n';
    if (!out) throw ValidationError("checkpoint write failed: " + path);
}

struct Checkpoint {
    ModelParams params;
    NormStats stats;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format") || !j["format"].is_string())
        throw CheckpointParseError("checkpoint: missing format tag");
    if (j["format"].get<std::string>() != kCheckpointFormat)
        throw CheckpointVersionError("checkpoint: format '" + j["format"].get<std::string>() +
                                     "', expected '" + kCheckpointFormat + "'");
    if (!j.contains("version") || !j["version"].is_number_integer())
        throw CheckpointParseError("checkpoint: missing version");
    if (j["version"].get<int>() != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint: version " + std::to_string(j["version"].get<int>()) +
                                     ", this build reads version " + std::to_string(kCheckpointVersion));

    ModelConfig cfg;
    std::uint64_t seed = 0;
    try {
        const auto& c = j.at("config");
        cfg.d_v = c.at("d_v").get<std::size_t>();
        cfg.L = c.at("L").get<std::size_t>();
        cfg.M = c.at("M").get<std::size_t>();
        seed = c.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointParseError(std::string("checkpoint: bad config block: ") + e.what());
    }
    validate(cfg);

    NormStats stats;
    try {
        stats = norm_stats_from_json(j.at("norm_stats"));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointParseError(std::string("checkpoint: bad norm_stats block: ") + e.what());
    } catch (const ValidationError& e) {
        throw CheckpointParseError(std::string("checkpoint: bad norm_stats block: ") + e.what());
    }

    // Build the shape manifest from the config, then fill every named array.
    Checkpoint out{init_params(cfg, seed), stats};
    out.params.seed = seed;
    if (!j.contains("params") || !j["params"].is_object())
        throw CheckpointParseError("checkpoint: missing params block");
    const auto& pj = j["params"];
    const auto names = parameter_names(cfg);
    auto tensors = collect_parameters(out.params);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!pj.contains(names[i]))
            throw CheckpointParseError("checkpoint: missing parameter '" + names[i] + "'");
        *tensors[i] = detail::tensor_from_json(pj[names[i]], tensors[i]->shape(), names[i]);
        if (!tensors[i]->all_finite())
            throw CheckpointParseError("checkpoint: parameter '" + names[i] + "' holds non-finite values");
    }
    return out;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointParseError(path + ": truncated or invalid JSON: " + e.what());
    }
    try {
        return checkpoint_from_json(j);
    } catch (const CheckpointError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointParseError(path + ": malformed checkpoint: " + e.what());
    }
}

} // namespace pilno
