#include "stmask/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace stmask::core {

namespace {

constexpr std::uint32_t kTensorMagic = 0x54425453u; // "STBT" little-endian
constexpr std::uint32_t kTensorVersion = 1;

// Dimension product guard: artifacts beyond this are treated as corrupt.
constexpr std::uint64_t kMaxElements = 1ull << 28;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
    char b[4];
    in.read(b, 4);
    if (in.gcount() != 4) throw FormatError(std::string("truncated ") + what);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
}

} // namespace

BehaviorTensor::BehaviorTensor(int c, int t, int h, int w) : C(c), T(t), H(h), W(w) {
    if (c <= 0 || t <= 0 || h <= 0 || w <= 0)
        throw std::invalid_argument("tensor dims must be positive");
    data.assign(static_cast<std::size_t>(c) * t * h * w, 0.0);
}

void BehaviorTensor::validate() const {
    if (C <= 0 || T <= 0 || H <= 0 || W <= 0)
        throw std::invalid_argument("tensor dims must be positive");
    if (data.size() != static_cast<std::size_t>(C) * T * H * W)
        throw std::invalid_argument("tensor buffer size does not match dims");
    for (double v : data)
        if (!std::isfinite(v)) throw std::invalid_argument("tensor holds non-finite value");
}

const char* task_name(Task t) {
    switch (t) {
        case Task::short_term: return "short";
        case Task::long_term: return "long";
        case Task::cold_start: return "cold";
    }
    throw std::invalid_argument("unknown task");
}

Task task_from_name(const std::string& name) {
    if (name == "short") return Task::short_term;
    if (name == "long") return Task::long_term;
    if (name == "cold") return Task::cold_start;
    throw std::invalid_argument("unknown task name: " + name);
}

EvidenceMask::EvidenceMask(int t, int h, int w) : T(t), H(h), W(w) {
    if (t <= 0 || h <= 0 || w <= 0)
        throw std::invalid_argument("mask dims must be positive");
    binary.assign(static_cast<std::size_t>(t) * h * w, 0);
    weights.assign(binary.size(), 0.0);
}

int EvidenceMask::popcount() const {
    int n = 0;
    for (std::uint8_t b : binary) n += b != 0;
    return n;
}

void EvidenceMask::validate() const {
    if (T <= 0 || H <= 0 || W <= 0)
        throw std::invalid_argument("mask dims must be positive");
    const std::size_t n = static_cast<std::size_t>(T) * H * W;
    if (binary.size() != n || weights.size() != n)
        throw std::invalid_argument("mask buffer size does not match dims");
    for (std::size_t i = 0; i < n; ++i) {
        if (binary[i] > 1) throw std::invalid_argument("mask binary value not in {0,1}");
        if (!std::isfinite(weights[i])) throw std::invalid_argument("mask weight non-finite");
        if ((binary[i] == 1) != (weights[i] > 0.0))
            throw std::invalid_argument("mask weights must be positive exactly on selected coords");
    }
    if (popcount() != budget) throw std::invalid_argument("mask budget does not match popcount");
}

BehaviorTensor apply_mask(const BehaviorTensor& x, const EvidenceMask& mask, bool weighted) {
    if (mask.T != x.T || mask.H != x.H || mask.W != x.W)
        throw std::invalid_argument("mask dims do not match tensor dims");
    BehaviorTensor out(x.C, x.T, x.H, x.W);
    const std::size_t cells = x.cells();
    for (int c = 0; c < x.C; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * cells;
        for (std::size_t i = 0; i < cells; ++i) {
            if (!mask.binary[i]) continue;
            out.data[base + i] = weighted ? x.data[base + i] * mask.weights[i]
                                          : x.data[base + i];
        }
    }
    return out;
}

void EventHistory::append(std::uint32_t app, std::uint32_t loc, std::int64_t ts) {
    app_id.push_back(app);
    location_id.push_back(loc);
    timestamp.push_back(ts);
}

// ----- STBT -----

void write_tensor(std::ostream& out, const BehaviorTensor& x) {
    x.validate();
    put_u32(out, kTensorMagic);
    put_u32(out, kTensorVersion);
    put_u32(out, static_cast<std::uint32_t>(x.C));
    put_u32(out, static_cast<std::uint32_t>(x.T));
    put_u32(out, static_cast<std::uint32_t>(x.H));
    put_u32(out, static_cast<std::uint32_t>(x.W));
    std::vector<float> buf(x.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(x.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw FormatError("tensor write failed");
}

BehaviorTensor read_tensor(std::istream& in) {
    if (get_u32(in, "magic") != kTensorMagic) throw FormatError("bad tensor magic");
    const std::uint32_t version = get_u32(in, "version");
    if (version != kTensorVersion)
        throw FormatError("unsupported tensor version " + std::to_string(version));
    std::uint32_t dims[4];
    for (int i = 0; i < 4; ++i) dims[i] = get_u32(in, "dims");
    std::uint64_t count = 1;
    for (std::uint32_t d : dims) {
        if (d == 0) throw FormatError("zero tensor dimension");
        count *= d;
        if (count > kMaxElements) throw FormatError("tensor dimension overflow");
    }
    BehaviorTensor x(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                     static_cast<int>(dims[2]), static_cast<int>(dims[3]));
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::uint64_t>(in.gcount()) != count * sizeof(float))
        throw FormatError("truncated tensor payload");
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::isfinite(buf[i])) throw FormatError("non-finite tensor value");
        x.data[i] = buf[i];
    }
    return x;
}

void write_tensor_file(const std::string& path, const BehaviorTensor& x) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for write: " + path);
    write_tensor(out, x);
}

BehaviorTensor read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for read: " + path);
    return read_tensor(in);
}

BehaviorTensor mask_to_tensor(const EvidenceMask& mask) {
    BehaviorTensor x(2, mask.T, mask.H, mask.W);
    const std::size_t n = mask.size();
    for (std::size_t i = 0; i < n; ++i) {
        x.data[i] = mask.binary[i];
        // weights pass through float quantization on export
        x.data[n + i] = static_cast<float>(mask.weights[i]);
    }
    return x;
}

// ----- events CSV -----

void write_events_csv(std::ostream& out, const std::vector<EventHistory>& users) {
    out << "user_id,app_id,location_id,timestamp\n";
    for (const auto& u : users)
        for (std::size_t i = 0; i < u.size(); ++i)
            out << u.user_id << ',' << u.app_id[i] << ',' << u.location_id[i] << ','
                << u.timestamp[i] << '\n';
    if (!out) throw FormatError("events write failed");
}

std::vector<EventHistory> read_events_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty events file");
    if (line == "user_id,app_id,location_id,timestamp\r")
        line.pop_back();
    if (line != "user_id,app_id,location_id,timestamp")
        throw FormatError("bad events header");
    std::vector<EventHistory> users;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::uint64_t fields[4];
        const char* p = line.c_str();
        for (int f = 0; f < 4; ++f) {
            char* end = nullptr;
            errno = 0;
            unsigned long long v = std::strtoull(p, &end, 10);
            if (end == p || errno != 0)
                throw FormatError("bad event field at line " + std::to_string(lineno));
            fields[f] = v;
            p = end;
            if (f < 3) {
                if (*p != ',') throw FormatError("ragged event row at line " + std::to_string(lineno));
                ++p;
            }
        }
        if (*p != '\0') throw FormatError("ragged event row at line " + std::to_string(lineno));
        const auto uid = static_cast<std::uint32_t>(fields[0]);
        if (users.empty() || users.back().user_id != uid) {
            for (const auto& u : users)
                if (u.user_id == uid)
                    throw FormatError("events for user " + std::to_string(uid) + " are not contiguous");
            users.emplace_back();
            users.back().user_id = uid;
        }
        auto& u = users.back();
        const auto ts = static_cast<std::int64_t>(fields[3]);
        if (!u.timestamp.empty() && ts < u.timestamp.back())
            throw FormatError("timestamps decrease at line " + std::to_string(lineno));
        u.append(static_cast<std::uint32_t>(fields[1]), static_cast<std::uint32_t>(fields[2]), ts);
    }
    return users;
}

void write_events_csv_file(const std::string& path, const std::vector<EventHistory>& users) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for write: " + path);
    write_events_csv(out, users);
}

std::vector<EventHistory> read_events_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open for read: " + path);
    return read_events_csv(in);
}

} // namespace stmask::core
