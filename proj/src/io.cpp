#include "veckv/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace veckv {

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[off_ + i]) << (8 * i);
        off_ += 4;
        return v;
    }

    std::uint64_t get_u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[off_ + i]) << (8 * i);
        off_ += 8;
        return v;
    }

    float get_f32() {
        const std::uint32_t bits = get_u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double get_f64() {
        const std::uint64_t bits = get_u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    void expect_magic(const char magic[4]) {
        need(4);
        if (std::memcmp(data_ + off_, magic, 4) != 0)
            throw FormatError("bad magic");
        off_ += 4;
    }

    std::size_t remaining() const { return size_ - off_; }

    void finish() const {
        if (off_ != size_) throw FormatError("trailing bytes after declared payload");
    }

private:
    void need(std::size_t k) const {
        if (size_ - off_ < k) throw FormatError("truncated file");
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t off_ = 0;
};

// n tokens of (d_k + d_v) f32 plus one u64 position each; checked in 128-bit
// to make absurd header counts fail cleanly instead of wrapping.
void check_layer_payload(std::uint64_t n, std::uint64_t d_k, std::uint64_t d_v,
                         std::size_t remaining) {
    const unsigned __int128 need =
        (unsigned __int128)n * (4 * (unsigned __int128)d_k + 4 * (unsigned __int128)d_v + 8);
    if (need > remaining)
        throw FormatError("declared token count exceeds payload");
}

} // namespace

std::vector<std::uint8_t> encode_dump(const ActivationDump& dump) {
    if (dump.layers.empty())
        throw FormatError("dump has no layers");
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'V', 'E', 'C', 'A'});
    put_u32(out, ActivationDump::kVersion);
    put_u32(out, static_cast<std::uint32_t>(dump.layers.size()));
    for (const LayerActivations& layer : dump.layers) {
        const Index n = layer.keys_pre.cols();
        if (n < 1 || layer.values.cols() != n ||
            static_cast<Index>(layer.positions.size()) != n)
            throw FormatError("dump layer with inconsistent token counts");
        put_u32(out, static_cast<std::uint32_t>(layer.keys_pre.rows()));
        put_u32(out, static_cast<std::uint32_t>(layer.values.rows()));
        put_u64(out, static_cast<std::uint64_t>(n));
        for (Index t = 0; t < n; ++t)
            for (Index j = 0; j < layer.keys_pre.rows(); ++j)
                put_f32(out, static_cast<float>(layer.keys_pre(j, t)));
        for (Index t = 0; t < n; ++t)
            for (Index j = 0; j < layer.values.rows(); ++j)
                put_f32(out, static_cast<float>(layer.values(j, t)));
        for (Index t = 0; t < n; ++t)
            put_u64(out, static_cast<std::uint64_t>(layer.positions[static_cast<std::size_t>(t)]));
    }
    return out;
}

ActivationDump decode_dump(const std::uint8_t* data, std::size_t size) {
    ByteReader r(data, size);
    r.expect_magic("VECA");
    if (r.get_u32() != ActivationDump::kVersion)
        throw FormatError("unsupported dump version");
    const std::uint32_t layer_count = r.get_u32();
    if (layer_count == 0)
        throw FormatError("dump declares zero layers");

    ActivationDump dump;
    dump.layers.reserve(layer_count);
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        const std::uint32_t d_k = r.get_u32();
        const std::uint32_t d_v = r.get_u32();
        const std::uint64_t n = r.get_u64();
        if (d_k == 0 || d_v == 0)
            throw FormatError("dump layer with zero dimension");
        if (n == 0)
            throw FormatError("dump layer with zero tokens");
        check_layer_payload(n, d_k, d_v, r.remaining());

        LayerActivations layer;
        layer.keys_pre.resize(d_k, static_cast<Index>(n));
        layer.values.resize(d_v, static_cast<Index>(n));
        layer.positions.resize(n);
        for (std::uint64_t t = 0; t < n; ++t)
            for (std::uint32_t j = 0; j < d_k; ++j)
                layer.keys_pre(j, static_cast<Index>(t)) = r.get_f32();
        for (std::uint64_t t = 0; t < n; ++t)
            for (std::uint32_t j = 0; j < d_v; ++j)
                layer.values(j, static_cast<Index>(t)) = r.get_f32();
        for (std::uint64_t t = 0; t < n; ++t) {
            const std::uint64_t pos = r.get_u64();
            if (pos > std::uint64_t(std::numeric_limits<Index>::max()))
                throw FormatError("position does not fit the index type");
            layer.positions[t] = static_cast<Index>(pos);
        }
        dump.layers.push_back(std::move(layer));
    }
    r.finish();
    return dump;
}

std::vector<std::uint8_t> encode_model(const ModelFile& file) {
    if (file.layers.empty())
        throw FormatError("model has no layers");
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'V', 'E', 'C', 'M'});
    put_u32(out, ModelFile::kVersion);
    put_u32(out, file.direction == FitDirection::KtoV ? 0u : 1u);
    put_u32(out, static_cast<std::uint32_t>(file.layers.size()));
    put_f64(out, file.ridge);
    for (const ModelFile::Layer& layer : file.layers) {
        if (layer.weights.rows() < 1 || layer.weights.cols() < 1)
            throw FormatError("model layer with empty weights");
        put_u32(out, static_cast<std::uint32_t>(layer.weights.rows()));
        put_u32(out, static_cast<std::uint32_t>(layer.weights.cols()));
        for (Index i = 0; i < layer.weights.rows(); ++i)
            for (Index j = 0; j < layer.weights.cols(); ++j)
                put_f32(out, layer.weights(i, j));
        put_f64(out, layer.heldout_r2);
    }
    return out;
}

ModelFile decode_model(const std::uint8_t* data, std::size_t size) {
    ByteReader r(data, size);
    r.expect_magic("VECM");
    if (r.get_u32() != ModelFile::kVersion)
        throw FormatError("unsupported model version");
    const std::uint32_t dir = r.get_u32();
    if (dir > 1)
        throw FormatError("unknown direction flag");
    const std::uint32_t layer_count = r.get_u32();
    if (layer_count == 0)
        throw FormatError("model declares zero layers");

    ModelFile file;
    file.direction = dir == 0 ? FitDirection::KtoV : FitDirection::VtoK;
    file.ridge = r.get_f64();
    file.layers.reserve(layer_count);
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        const std::uint32_t rows = r.get_u32();
        const std::uint32_t cols = r.get_u32();
        if (rows == 0 || cols == 0)
            throw FormatError("model layer with zero dimension");
        const unsigned __int128 need = (unsigned __int128)rows * cols * 4 + 8;
        if (need > r.remaining())
            throw FormatError("declared weight count exceeds payload");
        ModelFile::Layer layer;
        layer.weights.resize(rows, cols);
        for (std::uint32_t i = 0; i < rows; ++i)
            for (std::uint32_t j = 0; j < cols; ++j)
                layer.weights(i, j) = r.get_f32();
        layer.heldout_r2 = r.get_f64();
        file.layers.push_back(std::move(layer));
    }
    r.finish();
    return file;
}

CalibrationModeld to_calibration_model(const ModelFile& file, Index layer) {
    if (layer < 0 || layer >= static_cast<Index>(file.layers.size()))
        throw std::out_of_range("model layer index out of range");
    CalibrationModeld model;
    model.weights = file.layers[static_cast<std::size_t>(layer)].weights.cast<double>();
    model.direction = file.direction;
    model.ridge = file.ridge;
    model.test_r2 = file.layers[static_cast<std::size_t>(layer)].heldout_r2;
    return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad())
        throw FormatError("read failure: " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw FormatError("write failure: " + path);
}

void write_dump(const std::string& path, const ActivationDump& dump) {
    write_file_bytes(path, encode_dump(dump));
}

ActivationDump read_dump(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return decode_dump(bytes.data(), bytes.size());
}

void write_model(const std::string& path, const ModelFile& file) {
    write_file_bytes(path, encode_model(file));
}

ModelFile read_model(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return decode_model(bytes.data(), bytes.size());
}

} // namespace veckv
