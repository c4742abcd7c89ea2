#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace stmask::params {

/// Ordered collection of named 2-D double arrays. Iteration order is the
/// registration order, which every consumer relies on for determinism.
class ParameterStore {
public:
    struct Entry {
        std::string name;
        int rows = 0, cols = 0;
        std::vector<double> data;
    };

    int add(const std::string& name, int rows, int cols, std::vector<double> data);
    int add_zeros(const std::string& name, int rows, int cols);

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    int index_of(const std::string& name) const;
    const Entry& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }
    Entry& entry(int i) { return entries_[static_cast<std::size_t>(i)]; }
    const Entry& entry(const std::string& name) const { return entry(index_of(name)); }
    Entry& entry(const std::string& name) { return entry(index_of(name)); }
    const std::vector<double>& values(const std::string& name) const { return entry(name).data; }
    std::vector<double>& values(const std::string& name) { return entry(name).data; }

    int count() const { return static_cast<int>(entries_.size()); }
    std::size_t scalar_count() const;
    void require_finite() const;   // throws std::runtime_error naming the array

    /// Rounds every value through float32; models 32-bit parameter storage.
    void quantize_float32();

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Checkpoint container, shared by every module that persists parameters.
void write_checkpoint(std::ostream& out, const ParameterStore& store);
ParameterStore read_checkpoint(std::istream& in);
void write_checkpoint_file(const std::string& path, const ParameterStore& store);
ParameterStore read_checkpoint_file(const std::string& path);

/// Adaptive moment optimizer over a ParameterStore. Plain SGD when
/// plain_sgd is set (used to isolate optimizer state in gradient checks).
class AdamOptimizer {
public:
    AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    bool plain_sgd = false;

    /// grads[i] pairs with store entry i; shapes must match.
    void step(ParameterStore& store, const std::vector<std::vector<double>>& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    long step_count_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace stmask::params
