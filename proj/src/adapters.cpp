#include "arcopo/adapters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "arcopo/errors.hpp"
#include "arcopo/evalsuite.hpp"

namespace arcopo {

namespace {

LowRankAdapter::Factor make_factor(int out, int in, int rank, RngStream stream,
                                   double init_scale) {
    LowRankAdapter::Factor f;
    f.u = Matrix::zeros(out, rank);
    f.v = Matrix::zeros(rank, in);
    Vec g = stream.gaussian(f.v.a.size());
    const double scale = init_scale / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < f.v.a.size(); ++i) f.v.a[i] = g[i] * scale;
    return f;
}

}  // namespace

LowRankAdapter LowRankAdapter::init(const ModelDims& dims, int rank, double alpha,
                                    std::string tag, RngStream stream, double init_scale) {
    dims.validate();
    if (rank < 1) throw std::invalid_argument("LowRankAdapter: rank must be >= 1");
    LowRankAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    a.tag = std::move(tag);
    a.dims = dims;
    a.w1 = make_factor(dims.hidden1, dims.input_dim(), rank, stream.child("w1"), init_scale);
    a.w2 = make_factor(dims.hidden2, dims.hidden1, rank, stream.child("w2"), init_scale);
    a.w3 = make_factor(dims.chunk_dim, dims.hidden2, rank, stream.child("w3"), init_scale);
    a.we = make_factor(dims.context_dim, dims.context_dim + dims.chunk_dim, rank,
                       stream.child("we"), init_scale);
    return a;
}

Matrix LowRankAdapter::delta(const Factor& f, double alpha, int rank) {
    Matrix d = Matrix::zeros(f.u.rows, f.v.cols);
    const double s = alpha / rank;
    for (int i = 0; i < f.u.rows; ++i) {
        for (int j = 0; j < f.v.cols; ++j) {
            double acc = 0.0;
            for (int p = 0; p < rank; ++p) {
                acc += f.u.a[static_cast<std::size_t>(i) * rank + p] *
                       f.v.a[static_cast<std::size_t>(p) * f.v.cols + j];
            }
            d.a[static_cast<std::size_t>(i) * f.v.cols + j] = s * acc;
        }
    }
    return d;
}

std::size_t LowRankAdapter::factor_count() const {
    std::size_t n = 0;
    for (const Factor* f : {&w1, &w2, &w3, &we}) n += f->u.a.size() + f->v.a.size();
    return n;
}

Vec LowRankAdapter::flatten_factors() const {
    Vec out;
    out.reserve(factor_count());
    for (const Factor* f : {&w1, &w2, &w3, &we}) {
        out.insert(out.end(), f->u.a.begin(), f->u.a.end());
        out.insert(out.end(), f->v.a.begin(), f->v.a.end());
    }
    return out;
}

void LowRankAdapter::set_factors(const Vec& flat) {
    if (flat.size() != factor_count()) {
        throw std::invalid_argument("LowRankAdapter::set_factors: size mismatch");
    }
    std::size_t off = 0;
    for (Factor* f : {&w1, &w2, &w3, &we}) {
        std::copy(flat.begin() + off, flat.begin() + off + f->u.a.size(), f->u.a.begin());
        off += f->u.a.size();
        std::copy(flat.begin() + off, flat.begin() + off + f->v.a.size(), f->v.a.begin());
        off += f->v.a.size();
    }
}

ModelParams effective_params(const ModelParams& base,
                             std::span<const std::pair<const LowRankAdapter*, double>> adapters) {
    ModelParams out = base;
    for (const auto& [adapter, scale] : adapters) {
        if (adapter == nullptr) throw std::invalid_argument("effective_params: null adapter");
        if (!(adapter->dims == base.dims)) {
            throw std::invalid_argument("effective_params: adapter/base shape mismatch");
        }
        if (scale == 0.0) continue;  // keeps the s=0 merge bit-identical
        const struct {
            Matrix* target;
            const LowRankAdapter::Factor* factor;
        } pairs[] = {{&out.w1, &adapter->w1},
                     {&out.w2, &adapter->w2},
                     {&out.w3, &adapter->w3},
                     {&out.we, &adapter->we}};
        for (const auto& [target, factor] : pairs) {
            const Matrix d = LowRankAdapter::delta(*factor, adapter->alpha, adapter->rank);
            axpy(scale, d.a, target->a);
        }
    }
    return out;
}

namespace {

void write_raw(std::ofstream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_raw(std::ifstream& is, void* data, std::size_t n, const char* what) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is) throw IoError(std::string("adapter file: truncated ") + what);
}

}  // namespace

void save_adapter(const std::filesystem::path& path, const LowRankAdapter& adapter,
                  std::uint64_t config_hash, std::uint64_t root_seed) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open adapter file for writing: " + path.string());
    write_raw(os, kAdapterMagic, sizeof(kAdapterMagic) - 1);
    write_raw(os, &config_hash, sizeof(config_hash));
    write_raw(os, &root_seed, sizeof(root_seed));
    const std::int32_t header[6] = {adapter.dims.chunk_dim, adapter.dims.context_dim,
                                    adapter.dims.hidden1, adapter.dims.hidden2, adapter.rank,
                                    static_cast<std::int32_t>(adapter.tag.size())};
    write_raw(os, header, sizeof(header));
    write_raw(os, &adapter.alpha, sizeof(adapter.alpha));
    write_raw(os, adapter.tag.data(), adapter.tag.size());
    const Vec flat = adapter.flatten_factors();
    write_raw(os, flat.data(), flat.size() * sizeof(double));
    if (!os) throw IoError("adapter write failed: " + path.string());
}

LowRankAdapter load_adapter(const std::filesystem::path& path, const ModelDims& expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("adapter file not found: " + path.string());
    char magic[sizeof(kAdapterMagic) - 1];
    read_raw(is, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kAdapterMagic, sizeof(magic)) != 0) {
        throw IoError("not an adapter file: " + path.string());
    }
    std::uint64_t config_hash = 0, root_seed = 0;
    read_raw(is, &config_hash, sizeof(config_hash), "header");
    read_raw(is, &root_seed, sizeof(root_seed), "header");
    std::int32_t header[6];
    read_raw(is, header, sizeof(header), "header");
    double alpha = 0.0;
    read_raw(is, &alpha, sizeof(alpha), "header");
    if (header[0] != expected.chunk_dim || header[1] != expected.context_dim ||
        header[2] != expected.hidden1 || header[3] != expected.hidden2) {
        throw std::invalid_argument("adapter dimensions do not match: " + path.string());
    }
    std::string tag(static_cast<std::size_t>(header[5]), '\0');
    read_raw(is, tag.data(), tag.size(), "tag");

    LowRankAdapter a = LowRankAdapter::init(expected, header[4], alpha, tag, RngStream(0));
    Vec flat(a.factor_count());
    read_raw(is, flat.data(), flat.size() * sizeof(double), "factors");
    a.set_factors(flat);
    return a;
}

SweepReport scale_sweep(const ModelParams& base, const LowRankAdapter& semi_adapter,
                        const LowRankAdapter& on_adapter, std::span<const double> scales,
                        const EvalSuite& suite, double heldout_tolerance) {
    if (scales.empty()) throw std::invalid_argument("scale_sweep: no scales");

    const EvalResult base_eval = evaluate(base, suite);
    SweepReport report;
    report.base_in_domain = base_eval.in_domain;
    report.base_held_out = base_eval.held_out;

    for (double s : scales) {
        const std::pair<const LowRankAdapter*, double> merge[] = {{&semi_adapter, 1.0},
                                                                  {&on_adapter, s}};
        const ModelParams merged = effective_params(base, merge);
        const EvalResult r = evaluate(merged, suite);
        SweepRow row;
        row.scale = s;
        row.in_domain = r.in_domain;
        row.held_out = r.held_out;
        row.monitor_motion = r.monitor_motion;
        row.monitor_quality = r.monitor_quality;
        report.rows.push_back(row);
    }

    select_dual_improvement(report, heldout_tolerance);
    return report;
}

void select_dual_improvement(SweepReport& report, double heldout_tolerance) {
    // Largest scale that beats the base in-domain without giving up
    // held-out reward beyond the tolerance.
    const double heldout_floor =
        report.base_held_out - heldout_tolerance * std::abs(report.base_held_out);
    int best = -1;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        SweepRow& row = report.rows[i];
        row.selected = false;
        if (row.in_domain > report.base_in_domain && row.held_out >= heldout_floor) {
            if (best < 0 || row.scale > report.rows[static_cast<std::size_t>(best)].scale) {
                best = static_cast<int>(i);
            }
        }
    }
    if (best < 0) {
        report.no_improvement = true;
        report.selected_scale = 0.0;
        for (auto& row : report.rows) {
            if (row.scale == 0.0) row.selected = true;
        }
    } else {
        report.no_improvement = false;
        report.rows[static_cast<std::size_t>(best)].selected = true;
        report.selected_scale = report.rows[static_cast<std::size_t>(best)].scale;
    }
}

void write_sweep_csv(const SweepReport& report, std::uint64_t config_hash,
                     std::uint64_t root_seed, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open sweep csv for writing: " + path.string());
    char buf[512];
    std::snprintf(buf, sizeof(buf), "# config_hash=%016llx root_seed=%llu\n",
                  static_cast<unsigned long long>(config_hash),
                  static_cast<unsigned long long>(root_seed));
    os << buf;
    std::snprintf(buf, sizeof(buf), "# selected_scale=%.17g flag=%s\n", report.selected_scale,
                  report.no_improvement ? "no_improvement" : "ok");
    os << buf;
    os << "scale,held_out,monitor_motion,monitor_quality,in_domain,selected\n";
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", row.scale,
                      row.held_out, row.monitor_motion, row.monitor_quality, row.in_domain,
                      row.selected ? 1 : 0);
        os << buf;
    }
}

}  // namespace arcopo
