#pragma once

#include "veckv/core.hpp"
#include "veckv/regression.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace veckv {

// Malformed or inconsistent on-disk data. Readers refuse anything whose
// declared lengths disagree with the actual payload, including trailing bytes.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One layer of an activation dump: keys are stored before rotation, positions
// say where each token sat in its sequence.
struct LayerActivations {
    Eigen::MatrixXd keys_pre;  // d_k x n
    Eigen::MatrixXd values;    // d_v x n
    std::vector<Index> positions;
};

// "VECA" file: little-endian; header magic, u32 version, u32 layer count, then
// per layer u32 d_k, u32 d_v, u64 n, n*d_k f32 keys (token-major), n*d_v f32
// values, n u64 positions.
struct ActivationDump {
    static constexpr std::uint32_t kVersion = 1;
    std::vector<LayerActivations> layers;
};

std::vector<std::uint8_t> encode_dump(const ActivationDump& dump);
ActivationDump decode_dump(const std::uint8_t* data, std::size_t size);
void write_dump(const std::string& path, const ActivationDump& dump);
ActivationDump read_dump(const std::string& path);

// "VECM" file: little-endian; magic, u32 version, u32 direction (0 key->value,
// 1 value->key), u32 layer count, f64 ridge, then per layer u32 out_dim,
// u32 in_dim, out*in f32 weights (row-major), f64 held-out R^2. Weights are
// kept in single precision so write -> read round-trips bit-exactly.
struct ModelFile {
    static constexpr std::uint32_t kVersion = 1;
    struct Layer {
        Eigen::MatrixXf weights;
        double heldout_r2 = 0.0;
    };
    FitDirection direction = FitDirection::KtoV;
    double ridge = 0.0;
    std::vector<Layer> layers;
};

std::vector<std::uint8_t> encode_model(const ModelFile& file);
ModelFile decode_model(const std::uint8_t* data, std::size_t size);
void write_model(const std::string& path, const ModelFile& file);
ModelFile read_model(const std::string& path);

CalibrationModeld to_calibration_model(const ModelFile& file, Index layer);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

} // namespace veckv
