#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "pilno/error.hpp"
#include "pilno/rng.hpp"

namespace pilno {

inline constexpr double kPi = 3.14159265358979323846;

// One sample of the two-phase wetting fields at a space-time point under a
// given static contact angle. theta_s is kept in degrees everywhere in the
// dataset layer (matching the on-disk format); conversion to radians happens
// where an angle enters trigonometry.
struct DatasetRecord {
    double x = 0.0;        // m
    double y = 0.0;        // m
    double t = 0.0;        // s
    double theta_s = 90.0; // degrees, in [20, 160]
    double U = 0.0;        // m/s
    double V = 0.0;        // m/s
    double P = 0.0;        // Pa
    double phi = 0.0;      // dimensionless, in [-1, 1]
};

// ---------------------------------------------------------------------------
// Closed-form manufactured solution
// ---------------------------------------------------------------------------
//
// Velocity comes from a streamfunction, so it is divergence-free by
// construction; the phase field is a tanh profile across a spreading
// spherical-cap interface; pressure carries the capillary jump smeared over
// the interface. All fields are smooth and analytic, which makes derivative
// oracles exact.

struct ManufacturedConfig {
    double L = 1e-3;              // domain width, m
    double H = 1e-3;              // domain height, m
    double A = 1.6e-4;            // streamfunction amplitude, m^2/s
    double tau_v = 0.02;          // viscous decay time, s
    double tau_s = 0.025;         // spreading relaxation time, s
    double r0 = 2.5e-4;           // initial base radius, m
    double drop_volume = 0.0;     // m^3; 0 means "hemisphere of radius r0"
    double eps_interface = 5e-5;  // diffuse-interface half width, m
    double sigma_surface = 0.072; // surface tension, N/m
    double P_amb = 0.0;           // ambient pressure, Pa

    double resolved_drop_volume() const {
        return drop_volume > 0.0 ? drop_volume : (2.0 * kPi / 3.0) * r0 * r0 * r0;
    }
};

inline void validate(const ManufacturedConfig& c) {
    if (!(c.L > 0.0) || !(c.H > 0.0)) throw ValidationError("manufactured solution: degenerate domain");
    if (!(c.tau_v > 0.0) || !(c.tau_s > 0.0)) throw ValidationError("manufactured solution: relaxation times must be > 0");
    if (!(c.r0 > 0.0)) throw ValidationError("manufactured solution: initial radius must be > 0");
    if (!(c.eps_interface > 0.0)) throw ValidationError("manufactured solution: interface width must be > 0");
    if (c.drop_volume < 0.0) throw ValidationError("manufactured solution: drop volume must be >= 0");
}

// Volume of a spherical cap with base radius r and contact angle theta:
// V = (pi/3) r^3 (2 - 3 cos(theta) + cos^3(theta)) / sin^3(theta).
inline double cap_volume(double base_radius, double theta_rad) {
    const double s = std::sin(theta_rad);
    if (!(s > 0.0)) throw ValidationError("cap_volume: contact angle must lie in (0, 180) degrees");
    const double c = std::cos(theta_rad);
    const double shape = (2.0 - 3.0 * c + c * c * c) / (s * s * s);
    return kPi / 3.0 * base_radius * base_radius * base_radius * shape;
}

// Base radius of the spherical cap of volume V at contact angle theta
// (inverts cap_volume in r at fixed theta).
inline double cap_equilibrium_radius(double volume, double theta_rad) {
    const double s = std::sin(theta_rad);
    if (!(s > 0.0)) throw ValidationError("cap_equilibrium_radius: contact angle must lie in (0, 180) degrees");
    if (!(volume > 0.0)) throw ValidationError("cap_equilibrium_radius: volume must be > 0");
    const double c = std::cos(theta_rad);
    const double shape = (2.0 - 3.0 * c + c * c * c) / (s * s * s);
    return std::cbrt(3.0 * volume / (kPi * shape));
}

// Base radius relaxing exponentially from r0 toward the constant-volume
// equilibrium radius of the given contact angle.
inline double cap_base_radius(const ManufacturedConfig& cfg, double t, double theta_rad) {
    const double r_eq = cap_equilibrium_radius(cfg.resolved_drop_volume(), theta_rad);
    return r_eq + (cfg.r0 - r_eq) * std::exp(-t / cfg.tau_s);
}

// Analytic first derivatives of the manufactured velocity. dU_dx and dV_dy
// are assembled from the identical factor product so their sum cancels
// exactly in floating point, matching the streamfunction identity.
struct FlowDerivatives {
    double dU_dx, dU_dy, dV_dx, dV_dy, dU_dt, dV_dt;
};

inline FlowDerivatives manufactured_flow_derivatives(const ManufacturedConfig& cfg, double x, double y,
                                                     double t) {
    const double kx = kPi / cfg.L, ky = kPi / cfg.H;
    const double sx = std::sin(kx * x), cx = std::cos(kx * x);
    const double sy = std::sin(ky * y), cy = std::cos(ky * y);
    const double decay = std::exp(-t / cfg.tau_v);
    FlowDerivatives d{};
    const double cross = cfg.A * kx * ky * cx * cy * decay;
    d.dU_dx = cross;
    d.dV_dy = -cross;
    d.dU_dy = -cfg.A * ky * ky * sx * sy * decay;
    d.dV_dx = cfg.A * kx * kx * sx * sy * decay;
    d.dU_dt = -(cfg.A * ky * sx * cy * decay) / cfg.tau_v;
    d.dV_dt = (cfg.A * kx * cx * sy * decay) / cfg.tau_v;
    return d;
}

// Evaluate all four fields at one space-time point.
inline DatasetRecord manufactured_record(const ManufacturedConfig& cfg, double x, double y, double t,
                                         double theta_deg) {
    validate(cfg);
    if (!(theta_deg >= 20.0 && theta_deg <= 160.0))
        throw ValidationError("manufactured_record: contact angle " + std::to_string(theta_deg) +
                              " outside [20, 160] degrees");
    if (t < 0.0) throw ValidationError("manufactured_record: time must be >= 0");
    const double theta = theta_deg * kPi / 180.0;

    DatasetRecord rec;
    rec.x = x;
    rec.y = y;
    rec.t = t;
    rec.theta_s = theta_deg;

    // Streamfunction psi = A sin(pi x / L) sin(pi y / H) exp(-t / tau_v);
    // U = dpsi/dy, V = -dpsi/dx.
    const double kx = kPi / cfg.L, ky = kPi / cfg.H;
    const double decay = std::exp(-t / cfg.tau_v);
    rec.U = cfg.A * ky * std::sin(kx * x) * std::cos(ky * y) * decay;
    rec.V = -cfg.A * kx * std::cos(kx * x) * std::sin(ky * y) * decay;

    // Spherical-cap interface: sphere radius R = r(t)/sin(theta), centre on
    // the substrate normal at height -R cos(theta). Signed distance is
    // positive inside the droplet (liquid, phi -> +1).
    const double r_base = cap_base_radius(cfg, t, theta);
    const double R = r_base / std::sin(theta);
    const double xc = 0.5 * cfg.L;
    const double yc = -R * std::cos(theta);
    const double dist = std::hypot(x - xc, y - yc);
    rec.phi = std::tanh((R - dist) / (std::sqrt(2.0) * cfg.eps_interface));

    // Capillary pressure jump sigma * (2/R), smeared across the interface by
    // the liquid fraction (1 + phi) / 2.
    rec.P = cfg.P_amb + cfg.sigma_surface * (2.0 / R) * 0.5 * (1.0 + rec.phi);
    return rec;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct GenConfig {
    ManufacturedConfig field;
    std::vector<double> angles_deg;      // one condition per angle
    std::size_t snapshots = 200;         // uniform times on [0, t_end]
    double t_end = 0.08;                 // s
    std::size_t points_per_snapshot = 64;
    std::uint64_t seed = 1;
};

// Twelve angles evenly spaced over [20, 160] degrees.
inline std::vector<double> default_training_angles() {
    std::vector<double> a(12);
    for (std::size_t i = 0; i < a.size(); ++i)
        a[i] = 20.0 + 140.0 * static_cast<double>(i) / static_cast<double>(a.size() - 1);
    return a;
}

// Deterministic generation: conditions ordered by (angle index, snapshot
// index), each (angle, snapshot) shard drawing from its own seeded stream so
// the output is independent of evaluation order.
inline std::vector<DatasetRecord> generate_dataset(const GenConfig& cfg) {
    validate(cfg.field);
    if (cfg.angles_deg.empty()) throw ValidationError("generate_dataset: empty contact-angle list");
    if (cfg.snapshots == 0) throw ValidationError("generate_dataset: need at least one snapshot");
    if (cfg.points_per_snapshot == 0) throw ValidationError("generate_dataset: need at least one point per snapshot");
    if (!(cfg.t_end >= 0.0)) throw ValidationError("generate_dataset: t_end must be >= 0");
    for (double a : cfg.angles_deg)
        if (!(a >= 20.0 && a <= 160.0))
            throw ValidationError("generate_dataset: contact angle " + std::to_string(a) +
                                  " outside [20, 160] degrees");

    std::vector<DatasetRecord> out;
    out.reserve(cfg.angles_deg.size() * cfg.snapshots * cfg.points_per_snapshot);
    for (std::size_t ai = 0; ai < cfg.angles_deg.size(); ++ai) {
        for (std::size_t si = 0; si < cfg.snapshots; ++si) {
            const double t = cfg.snapshots == 1
                                 ? 0.0
                                 : cfg.t_end * static_cast<double>(si) / static_cast<double>(cfg.snapshots - 1);
            Rng rng(cfg.seed + 1000003ULL * (ai * cfg.snapshots + si));
            for (std::size_t p = 0; p < cfg.points_per_snapshot; ++p) {
                const double x = rng.uniform(0.0, cfg.field.L);
                const double y = rng.uniform(0.0, cfg.field.H);
                out.push_back(manufactured_record(cfg.field, x, y, t, cfg.angles_deg[ai]));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Train/test split by contact angle
// ---------------------------------------------------------------------------

namespace detail {
inline bool angle_matches(double theta, double held) { return std::abs(theta - held) <= 1e-9; }
} // namespace detail

// Partition records into (train, test): every record whose angle matches a
// held-out angle goes to test. Each held-out angle must actually occur.
inline std::pair<std::vector<DatasetRecord>, std::vector<DatasetRecord>> split_by_contact_angle(
    const std::vector<DatasetRecord>& records, const std::vector<double>& held_out_deg) {
    for (double h : held_out_deg) {
        bool found = false;
        for (const auto& r : records)
            if (detail::angle_matches(r.theta_s, h)) {
                found = true;
                break;
            }
        if (!found)
            throw ValidationError("split_by_contact_angle: held-out angle " + std::to_string(h) +
                                  " not present in the dataset");
    }
    std::vector<DatasetRecord> train, test;
    for (const auto& r : records) {
        bool held = false;
        for (double h : held_out_deg)
            if (detail::angle_matches(r.theta_s, h)) {
                held = true;
                break;
            }
        (held ? test : train).push_back(r);
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------
//
// Coordinates (x, y, t) are min-max mapped to [-1, 1]; the contact angle
// enters the model through cos/sin and needs no scaling. Output fields are
// z-scored; a constant field is flagged and maps to 0.

struct NormStats {
    std::array<double, 3> in_min{}, in_max{};    // x, y, t
    std::array<double, 4> out_mean{}, out_std{}; // U, V, P, phi
    std::array<bool, 4> out_constant{};
};

inline const std::array<const char*, 3>& input_names() {
    static const std::array<const char*, 3> n{"x", "y", "t"};
    return n;
}

inline const std::array<const char*, 4>& output_names() {
    static const std::array<const char*, 4> n{"U", "V", "P", "phi"};
    return n;
}

inline NormStats fit_norm_stats(const std::vector<DatasetRecord>& records) {
    if (records.empty()) throw ValidationError("fit_norm_stats: empty training split");
    NormStats s;
    auto in_of = [](const DatasetRecord& r, std::size_t i) {
        return i == 0 ? r.x : i == 1 ? r.y : r.t;
    };
    auto out_of = [](const DatasetRecord& r, std::size_t i) {
        return i == 0 ? r.U : i == 1 ? r.V : i == 2 ? r.P : r.phi;
    };
    for (std::size_t i = 0; i < 3; ++i) {
        double lo = in_of(records[0], i), hi = lo;
        for (const auto& r : records) {
            lo = std::min(lo, in_of(r, i));
            hi = std::max(hi, in_of(r, i));
        }
        if (!(hi > lo))
            throw ValidationError(std::string("fit_norm_stats: input coordinate '") + input_names()[i] +
                                  "' is constant; cannot map to [-1, 1]");
        s.in_min[i] = lo;
        s.in_max[i] = hi;
    }
    const double n = static_cast<double>(records.size());
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0;
        for (const auto& r : records) mean += out_of(r, i);
        mean /= n;
        double var = 0.0;
        for (const auto& r : records) {
            const double d = out_of(r, i) - mean;
            var += d * d;
        }
        var /= n;
        const double sd = std::sqrt(var);
        s.out_mean[i] = mean;
        if (sd > 0.0) {
            s.out_std[i] = sd;
            s.out_constant[i] = false;
        } else {
            s.out_std[i] = 1.0; // placeholder; flagged values normalize to 0
            s.out_constant[i] = true;
        }
    }
    return s;
}

// Map v from [lo, hi] to [-1, 1] (and back). No clamping here; out-of-range
// inputs map outside [-1, 1] and are the caller's concern.
inline double minmax_scale(double v, double lo, double hi) { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
inline double minmax_unscale(double u, double lo, double hi) { return lo + (u + 1.0) * 0.5 * (hi - lo); }

inline std::array<double, 4> normalize_outputs(const NormStats& s, const DatasetRecord& r) {
    const std::array<double, 4> raw{r.U, r.V, r.P, r.phi};
    std::array<double, 4> out{};
    for (std::size_t i = 0; i < 4; ++i)
        out[i] = s.out_constant[i] ? 0.0 : (raw[i] - s.out_mean[i]) / s.out_std[i];
    return out;
}

inline std::array<double, 4> denormalize_outputs(const NormStats& s, const std::array<double, 4>& z) {
    std::array<double, 4> out{};
    for (std::size_t i = 0; i < 4; ++i)
        out[i] = s.out_constant[i] ? s.out_mean[i] : z[i] * s.out_std[i] + s.out_mean[i];
    return out;
}

// ---------------------------------------------------------------------------
// CSV dataset files
// ---------------------------------------------------------------------------

inline constexpr const char* kDatasetHeader = "x,y,t,theta_s,U,V,P,phi";
inline constexpr const char* kPointsHeader = "x,y,t,theta_s";

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double_field(const std::string& field, const std::string& path, std::size_t line_no,
                                 std::size_t col) {
    const char* b = field.data();
    const char* e = b + field.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    double v = 0.0;
    auto res = std::from_chars(b, e, v);
    const char* rest = res.ptr;
    while (rest < e && (*rest == ' ' || *rest == '\t')) ++rest;
    if (res.ec != std::errc() || rest != e)
        throw ValidationError(path + ":" + std::to_string(line_no) + ": column " + std::to_string(col + 1) +
                              " is not a number: '" + field + "'");
    if (!std::isfinite(v))
        throw ValidationError(path + ":" + std::to_string(line_no) + ": column " + std::to_string(col + 1) +
                              " is not finite");
    return v;
}

inline std::vector<std::array<double, 8>> read_csv_rows(const std::string& path, const char* header,
                                                        std::size_t n_cols) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(path + ": empty file (expected header '" + header + "')");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != header)
        throw ValidationError(path + ":1: header mismatch: expected '" + header + "', got '" + line + "'");
    std::vector<std::array<double, 8>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::array<double, 8> row{};
        std::size_t col = 0, pos = 0;
        while (true) {
            const std::size_t comma = line.find(',', pos);
            const std::string field =
                comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos);
            if (col >= n_cols)
                throw ValidationError(path + ":" + std::to_string(line_no) + ": expected " +
                                      std::to_string(n_cols) + " columns, found more");
            row[col] = parse_double_field(field, path, line_no, col);
            ++col;
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (col != n_cols)
            throw ValidationError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(n_cols) +
                                  " columns, found " + std::to_string(col));
        rows.push_back(row);
    }
    if (rows.empty()) throw ValidationError(path + ": no data rows");
    return rows;
}

} // namespace detail

inline void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << kDatasetHeader << '\n';
    for (const auto& r : records) {
        out << detail::format_double(r.x) << ',' << detail::format_double(r.y) << ','
            << detail::format_double(r.t) << ',' << detail::format_double(r.theta_s) << ','
            << detail::format_double(r.U) << ',' << detail::format_double(r.V) << ','
            << detail::format_double(r.P) << ',' << detail::format_double(r.phi) << '\n';
    }
    if (!out) throw ValidationError("write failed: " + path);
}

inline std::vector<DatasetRecord> read_dataset(const std::string& path) {
    const auto rows = detail::read_csv_rows(path, kDatasetHeader, 8);
    std::vector<DatasetRecord> records;
    records.reserve(rows.size());
    for (const auto& w : rows)
        records.push_back(DatasetRecord{w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]});
    return records;
}

// ---------------------------------------------------------------------------
// Normalization-stats sidecar (JSON)
// ---------------------------------------------------------------------------

inline nlohmann::json norm_stats_to_json(const NormStats& s) {
    nlohmann::json j;
    j["input_min"] = s.in_min;
    j["input_max"] = s.in_max;
    j["output_mean"] = s.out_mean;
    j["output_std"] = s.out_std;
    j["output_constant"] = s.out_constant;
    return j;
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats s;
    try {
        s.in_min = j.at("input_min").get<std::array<double, 3>>();
        s.in_max = j.at("input_max").get<std::array<double, 3>>();
        s.out_mean = j.at("output_mean").get<std::array<double, 4>>();
        s.out_std = j.at("output_std").get<std::array<double, 4>>();
        s.out_constant = j.at("output_constant").get<std::array<bool, 4>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed normalization stats: ") + e.what());
    }
    for (std::size_t i = 0; i < 3; ++i)
        if (!(s.in_max[i] > s.in_min[i]))
            throw ValidationError(std::string("normalization stats: input '") + input_names()[i] +
                                  "' has max <= min");
    for (std::size_t i = 0; i < 4; ++i)
        if (!(s.out_std[i] > 0.0))
            throw ValidationError(std::string("normalization stats: output '") + output_names()[i] +
                                  "' has non-positive stddev");
    return s;
}

inline void write_norm_stats(const std::string& path, const NormStats& s) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << norm_stats_to_json(s).dump(2) << '\n';
    if (!out) throw ValidationError("write failed: " + path);
}

inline NormStats read_norm_stats(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open normalization stats: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path + ": invalid JSON: " + e.what());
    }
    return norm_stats_from_json(j);
}

// Query point for inference: coordinates plus contact angle, no field values.
struct QueryPoint {
    double x = 0.0, y = 0.0, t = 0.0, theta_s = 90.0;
};

inline std::vector<QueryPoint> read_query_points(const std::string& path) {
    const auto rows = detail::read_csv_rows(path, kPointsHeader, 4);
    std::vector<QueryPoint> pts;
    pts.reserve(rows.size());
    for (const auto& w : rows) pts.push_back(QueryPoint{w[0], w[1], w[2], w[3]});
    return pts;
}

} // namespace pilno
