#include "stmask/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "stmask/tensor.hpp"

namespace stmask::params {

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x4B435453u; // "STCK" little-endian
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kMaxArrayElements = 1u << 28;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw core::FormatError(std::string("checkpoint truncated reading ") + what);
    return v;
}

} // namespace

int ParameterStore::add(const std::string& name, int rows, int cols, std::vector<double> data) {
    if (name.empty()) throw std::invalid_argument("parameter name empty");
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    if (rows < 1 || cols < 1) throw std::invalid_argument("parameter dims must be positive: " + name);
    if (data.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
        throw std::invalid_argument("parameter buffer size mismatch: " + name);
    const int id = static_cast<int>(entries_.size());
    entries_.push_back({name, rows, cols, std::move(data)});
    index_.emplace(name, id);
    return id;
}

int ParameterStore::add_zeros(const std::string& name, int rows, int cols) {
    return add(name, rows, cols,
               std::vector<double>(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0));
}

int ParameterStore::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.data.size();
    return n;
}

void ParameterStore::require_finite() const {
    for (const auto& e : entries_)
        for (std::size_t i = 0; i < e.data.size(); ++i)
            if (!std::isfinite(e.data[i]))
                throw std::runtime_error("non-finite value in parameter array " + e.name +
                                         " at index " + std::to_string(i));
}

void ParameterStore::quantize_float32() {
    for (auto& e : entries_)
        for (double& v : e.data) v = static_cast<double>(static_cast<float>(v));
}

void write_checkpoint(std::ostream& out, const ParameterStore& store) {
    put(out, kCheckpointMagic);
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint32_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) {
        const auto& e = store.entry(i);
        if (e.name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long: " + e.name);
        put(out, static_cast<std::uint16_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put(out, static_cast<std::uint8_t>(2));
        put(out, static_cast<std::uint32_t>(e.rows));
        put(out, static_cast<std::uint32_t>(e.cols));
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    }
    if (!out) throw core::FormatError("checkpoint write failed");
}

ParameterStore read_checkpoint(std::istream& in) {
    if (take<std::uint32_t>(in, "magic") != kCheckpointMagic)
        throw core::FormatError("bad checkpoint magic");
    if (take<std::uint32_t>(in, "version") != kCheckpointVersion)
        throw core::FormatError("unsupported checkpoint version");
    const std::uint32_t count = take<std::uint32_t>(in, "count");
    ParameterStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = take<std::uint16_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw core::FormatError("checkpoint truncated reading name");
        const std::uint8_t rank = take<std::uint8_t>(in, "rank");
        if (rank != 2) throw core::FormatError("unsupported array rank in checkpoint");
        const std::uint32_t rows = take<std::uint32_t>(in, "rows");
        const std::uint32_t cols = take<std::uint32_t>(in, "cols");
        if (rows == 0 || cols == 0) throw core::FormatError("zero checkpoint dimension");
        if (rows > kMaxArrayElements / cols) throw core::FormatError("checkpoint dimension overflow");
        std::vector<double> data(static_cast<std::size_t>(rows) * cols);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) throw core::FormatError("checkpoint truncated reading payload");
        store.add(name, static_cast<int>(rows), static_cast<int>(cols), std::move(data));
    }
    return store;
}

void write_checkpoint_file(const std::string& path, const ParameterStore& store) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw core::FormatError("cannot open for write: " + path);
    write_checkpoint(out, store);
}

ParameterStore read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw core::FormatError("cannot open for read: " + path);
    return read_checkpoint(in);
}

void AdamOptimizer::step(ParameterStore& store, const std::vector<std::vector<double>>& grads) {
    if (grads.size() != static_cast<std::size_t>(store.count()))
        throw std::invalid_argument("gradient list does not match parameter store");
    if (plain_sgd) {
        for (int i = 0; i < store.count(); ++i) {
            auto& e = store.entry(i);
            const auto& gr = grads[static_cast<std::size_t>(i)];
            for (std::size_t k = 0; k < e.data.size(); ++k) e.data[k] -= lr_ * gr[k];
        }
        return;
    }
    if (m_.empty()) {
        m_.resize(grads.size());
        v_.resize(grads.size());
        for (std::size_t i = 0; i < grads.size(); ++i) {
            m_[i].assign(grads[i].size(), 0.0);
            v_[i].assign(grads[i].size(), 0.0);
        }
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (int i = 0; i < store.count(); ++i) {
        auto& e = store.entry(i);
        const auto& gr = grads[static_cast<std::size_t>(i)];
        auto& m = m_[static_cast<std::size_t>(i)];
        auto& v = v_[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < e.data.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * gr[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * gr[k] * gr[k];
            e.data[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
        }
    }
}

} // namespace stmask::params
