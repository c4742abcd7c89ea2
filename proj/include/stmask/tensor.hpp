#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace stmask::core {

/// Raised for malformed on-disk artifacts (bad magic, truncated payload, ...).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense behavior tensor, dims (C, T, H, W), row-major with c outermost.
/// Values are held as doubles internally; the disk format stores float32.
struct BehaviorTensor {
    int C = 0, T = 0, H = 0, W = 0;
    std::vector<double> data;

    BehaviorTensor() = default;
    BehaviorTensor(int c, int t, int h, int w);

    std::size_t size() const { return data.size(); }
    std::size_t cells() const { return static_cast<std::size_t>(T) * H * W; }

    std::size_t index(int c, int t, int h, int w) const {
        return ((static_cast<std::size_t>(c) * T + t) * H + h) * W + w;
    }
    double& at(int c, int t, int h, int w) { return data[index(c, t, h, w)]; }
    double at(int c, int t, int h, int w) const { return data[index(c, t, h, w)]; }

    /// Throws std::invalid_argument if dims are non-positive or a value is non-finite.
    void validate() const;
};

enum class Task : int { short_term = 0, long_term = 1, cold_start = 2 };
constexpr int kNumTasks = 3;
const char* task_name(Task t);
Task task_from_name(const std::string& name);

/// Evidence mask over the (T, H, W) grid, broadcast across channels.
/// binary marks selected coordinates; weights carry the relevance score at
/// selected coordinates and are zero elsewhere (weights > 0 iff binary = 1).
struct EvidenceMask {
    int T = 0, H = 0, W = 0;
    std::vector<std::uint8_t> binary;
    std::vector<double> weights;
    Task task = Task::short_term;
    int budget = 0;          // selected coordinate count
    double rho_tilde = 0.0;  // effective observation ratio that produced budget

    EvidenceMask() = default;
    EvidenceMask(int t, int h, int w);

    std::size_t size() const { return binary.size(); }
    std::size_t index(int t, int h, int w) const {
        return (static_cast<std::size_t>(t) * H + h) * W + w;
    }
    int popcount() const;

    void validate() const;
};

/// masked(c,i) = x(c,i) * binary(i), or * weights(i) when weighted is set.
BehaviorTensor apply_mask(const BehaviorTensor& x, const EvidenceMask& mask,
                          bool weighted = false);

/// Per-user interaction log; timestamps are slot indices, non-decreasing.
struct EventHistory {
    std::uint32_t user_id = 0;
    std::vector<std::uint32_t> app_id;
    std::vector<std::uint32_t> location_id;
    std::vector<std::int64_t> timestamp;

    std::size_t size() const { return timestamp.size(); }
    void append(std::uint32_t app, std::uint32_t loc, std::int64_t ts);
};

// ----- serialization -----
// Tensor container: magic "STBT", version u32, dims C,T,H,W u32, then
// C*T*H*W float32 values in index order, little-endian.

void write_tensor(std::ostream& out, const BehaviorTensor& x);
BehaviorTensor read_tensor(std::istream& in);
void write_tensor_file(const std::string& path, const BehaviorTensor& x);
BehaviorTensor read_tensor_file(const std::string& path);

/// Masks exported as tensors use C=2: plane 0 = binary, plane 1 = weights.
BehaviorTensor mask_to_tensor(const EvidenceMask& mask);

// Event CSV: header "user_id,app_id,location_id,timestamp", one row per event.
// The loader enforces non-decreasing timestamps per user and rejects ragged rows.

void write_events_csv(std::ostream& out, const std::vector<EventHistory>& users);
std::vector<EventHistory> read_events_csv(std::istream& in);
void write_events_csv_file(const std::string& path, const std::vector<EventHistory>& users);
std::vector<EventHistory> read_events_csv_file(const std::string& path);

} // namespace stmask::core
