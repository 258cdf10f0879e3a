#pragma once

// Primal-dual interior-point solver for the ConicProgram form.
//
// The program is lowered to the standard cone LP
//
//     min c'x   s.t.  A x = b,   G x + s = h,   s in K,
//
// where K is a product of a nonnegative orthant and second-order cones.
// Opposing affine block pairs (exact float negations of each other) are
// merged into equality rows of A; every other affine block becomes one
// orthant row and every norm block one second-order cone in G.
//
// The solver runs the homogeneous self-dual embedding with Nesterov-Todd
// scaling and a Mehrotra predictor-corrector step, factoring a sparse
// regularized KKT system once per iteration. It is deterministic: no
// randomness, fixed orderings, single-threaded.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include <Eigen/SparseLU>

#include "types.hpp"

namespace pevplan::conic {

struct SolverSettings {
    double tol = 1e-8;          // feasibility and relative-gap target
    int max_iterations = 120;
    double step_fraction = 0.99;
    double static_reg = 1e-10;  // KKT diagonal regularization
    int refine_steps = 2;       // iterative refinement passes per solve
    int equil_iters = 4;        // Ruiz equilibration sweeps
};

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

inline double inf_norm(const Vector& v) {
    return v.size() > 0 ? v.lpNorm<Eigen::Infinity>() : 0.0;
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

enum class ConeKind : std::uint8_t { lp_row, soc_block, eq_pos, eq_neg };

struct ConeRef {
    ConeKind kind;
    Index idx;  // lp: row in G; soc: first row of block in G; eq: row in A
};

struct LoweredForm {
    Vector c;
    SparseMatrix A;  // p x n equalities
    Vector b;
    SparseMatrix G;  // m x n: nlp orthant rows, then SOC blocks
    Vector h;
    Index n = 0, p = 0, m = 0, nlp = 0;
    std::vector<Index> soc_dims;
    std::vector<ConeRef> cone_map;  // per original cone
};

// Bit-exact signature of an affine row (nonzero pattern of d plus f);
// used to detect opposing pairs emitted by the model builders.
inline std::vector<std::uint64_t> affine_signature(const Vector& d, double f,
                                                   bool negate) {
    std::vector<std::uint64_t> sig;
    sig.reserve(2 * d.size() + 2);
    auto push = [&sig](double v) {
        std::uint64_t bits;
        if (v == 0.0) v = 0.0;  // normalize -0.0
        std::memcpy(&bits, &v, sizeof bits);
        sig.push_back(bits);
    };
    for (Index i = 0; i < d.size(); ++i) {
        double v = d[i];
        if (v == 0.0) continue;
        sig.push_back(static_cast<std::uint64_t>(i));
        push(negate ? -v : v);
    }
    push(negate ? -f : f);
    return sig;
}

inline LoweredForm lower(const ConicProgram& prog) {
    prog.validate();
    const Index n = prog.dim_y;
    const std::size_t ncones = prog.cones.size();

    // Pair opposing affine blocks.
    std::map<std::vector<std::uint64_t>, std::vector<std::size_t>> unpaired;
    std::vector<std::ptrdiff_t> partner(ncones, -1);
    for (std::size_t j = 0; j < ncones; ++j) {
        if (!prog.cones[j].is_affine()) continue;
        auto neg = affine_signature(prog.cones[j].d, prog.cones[j].f_bar, true);
        auto it = unpaired.find(neg);
        if (it != unpaired.end() && !it->second.empty()) {
            std::size_t mate = it->second.front();
            it->second.erase(it->second.begin());
            partner[mate] = static_cast<std::ptrdiff_t>(j);
            partner[j] = static_cast<std::ptrdiff_t>(mate);
        } else {
            auto sig = affine_signature(prog.cones[j].d, prog.cones[j].f_bar, false);
            unpaired[sig].push_back(j);
        }
    }

    LoweredForm lf;
    lf.n = n;
    lf.c = prog.objective;
    lf.cone_map.resize(ncones);

    std::vector<Triplet> a_trip, g_trip;
    std::vector<double> b_vals, h_vals;

    // Equality rows first (pairs), orientation from the lower-index member.
    for (std::size_t j = 0; j < ncones; ++j) {
        if (partner[j] < 0 || static_cast<std::size_t>(partner[j]) < j) continue;
        const auto& cb = prog.cones[j];
        const Index row = static_cast<Index>(b_vals.size());
        for (Index i = 0; i < n; ++i)
            if (cb.d[i] != 0.0) a_trip.emplace_back(row, i, cb.d[i]);
        b_vals.push_back(-cb.f_bar);
        lf.cone_map[j] = {ConeKind::eq_pos, row};
        lf.cone_map[static_cast<std::size_t>(partner[j])] = {ConeKind::eq_neg, row};
    }

    // Orthant rows: 0 <= d'y + f  ->  -d'y + s = f.
    for (std::size_t j = 0; j < ncones; ++j) {
        if (!prog.cones[j].is_affine() || partner[j] >= 0) continue;
        const auto& cb = prog.cones[j];
        const Index row = static_cast<Index>(h_vals.size());
        for (Index i = 0; i < n; ++i)
            if (cb.d[i] != 0.0) g_trip.emplace_back(row, i, -cb.d[i]);
        h_vals.push_back(cb.f_bar);
        lf.cone_map[j] = {ConeKind::lp_row, row};
    }
    lf.nlp = static_cast<Index>(h_vals.size());

    // SOC blocks: slack (d'y + f, B y + e) in Q^{1+r}.
    for (std::size_t j = 0; j < ncones; ++j) {
        if (prog.cones[j].is_affine()) continue;
        const auto& cb = prog.cones[j];
        const Index off = static_cast<Index>(h_vals.size());
        for (Index i = 0; i < n; ++i)
            if (cb.d[i] != 0.0) g_trip.emplace_back(off, i, -cb.d[i]);
        h_vals.push_back(cb.f_bar);
        for (int k = 0; k < cb.B.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(cb.B, k); it; ++it)
                g_trip.emplace_back(off + 1 + it.row(), it.col(), -it.value());
        for (Index r = 0; r < cb.rows(); ++r) h_vals.push_back(cb.e_bar[r]);
        lf.soc_dims.push_back(1 + cb.rows());
        lf.cone_map[j] = {ConeKind::soc_block, off};
    }

    lf.p = static_cast<Index>(b_vals.size());
    lf.m = static_cast<Index>(h_vals.size());
    lf.A = sparse_from_triplets(lf.p, n, a_trip);
    lf.b = Eigen::Map<const Vector>(b_vals.data(), lf.p);
    lf.G = sparse_from_triplets(lf.m, n, g_trip);
    lf.h = Eigen::Map<const Vector>(h_vals.data(), lf.m);
    return lf;
}

// ---------------------------------------------------------------------------
// Cone algebra
// ---------------------------------------------------------------------------

struct ConeLayout {
    Index nlp;
    std::vector<Index> soc_dims;
    std::vector<Index> soc_off;  // offsets of SOC blocks within an m-vector
    Index m = 0;
    double degree = 0;  // barrier degree: nlp + #soc

    ConeLayout() = default;
    ConeLayout(Index nlp_, std::vector<Index> dims) : nlp(nlp_), soc_dims(std::move(dims)) {
        Index off = nlp;
        for (Index d : soc_dims) {
            soc_off.push_back(off);
            off += d;
        }
        m = off;
        degree = static_cast<double>(nlp + static_cast<Index>(soc_dims.size()));
    }

    // Identity element of the cone product.
    Vector identity() const {
        Vector e = Vector::Zero(m);
        e.head(nlp).setOnes();
        for (std::size_t k = 0; k < soc_dims.size(); ++k) e[soc_off[k]] = 1.0;
        return e;
    }

    // Largest t with v + t*e on the cone boundary (negative if interior).
    double max_violation(const Vector& v) const {
        double t = -kInf;
        for (Index i = 0; i < nlp; ++i) t = std::max(t, -v[i]);
        for (std::size_t k = 0; k < soc_dims.size(); ++k) {
            const Index o = soc_off[k], d = soc_dims[k];
            t = std::max(t, v.segment(o + 1, d - 1).norm() - v[o]);
        }
        return t;
    }

    // Largest step alpha with v + alpha*dv in K (capped).
    double max_step(const Vector& v, const Vector& dv, double cap) const {
        double alpha = cap;
        for (Index i = 0; i < nlp; ++i)
            if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
        for (std::size_t k = 0; k < soc_dims.size(); ++k) {
            const Index o = soc_off[k], d = soc_dims[k];
            const double v0 = v[o], dv0 = dv[o];
            const auto v1 = v.segment(o + 1, d - 1);
            const auto dv1 = dv.segment(o + 1, d - 1);
            // boundary: (v0 + a dv0)^2 = ||v1 + a dv1||^2
            const double qa = dv0 * dv0 - dv1.squaredNorm();
            const double qb = 2.0 * (v0 * dv0 - v1.dot(dv1));
            const double qc = v0 * v0 - v1.squaredNorm();
            // Smallest positive root is the exit point: the interior iterate
            // cannot reach the negative branch without crossing zero first.
            double root = kInf;
            if (std::abs(qa) < 1e-15 * std::max(1.0, std::abs(qb))) {
                if (qb < 0.0) root = -qc / qb;
            } else {
                const double disc = qb * qb - 4.0 * qa * qc;
                if (disc >= 0.0) {
                    const double sq = std::sqrt(disc);
                    const double r1 = (-qb - sq) / (2.0 * qa);
                    const double r2 = (-qb + sq) / (2.0 * qa);
                    if (r1 > 1e-15) root = std::min(root, r1);
                    if (r2 > 1e-15) root = std::min(root, r2);
                }
            }
            alpha = std::min(alpha, root);
        }
        return alpha;
    }
};

// Nesterov-Todd scaling point for (s, z) in int K. W is symmetric with
// W z = W^{-1} s = lambda.
struct NTScaling {
    const ConeLayout* lay = nullptr;
    Vector w_lp;             // sqrt(s_i / z_i)
    Vector lambda;           // scaled point, full m-vector
    struct SocScale {
        double eta = 1.0;    // (det s / det z)^{1/4}
        Vector wbar;         // hyperbolic unit vector
    };
    std::vector<SocScale> soc;

    void compute(const ConeLayout& layout, const Vector& s, const Vector& z) {
        lay = &layout;
        w_lp = (s.head(layout.nlp).array() / z.head(layout.nlp).array()).sqrt();
        lambda.resize(layout.m);
        lambda.head(layout.nlp) =
            (s.head(layout.nlp).array() * z.head(layout.nlp).array()).sqrt();
        soc.resize(layout.soc_dims.size());
        for (std::size_t k = 0; k < layout.soc_dims.size(); ++k) {
            const Index o = layout.soc_off[k], d = layout.soc_dims[k];
            const auto sk = s.segment(o, d);
            const auto zk = z.segment(o, d);
            const double dets = sk[0] * sk[0] - sk.tail(d - 1).squaredNorm();
            const double detz = zk[0] * zk[0] - zk.tail(d - 1).squaredNorm();
            const double rs = std::sqrt(std::max(dets, 1e-300));
            const double rz = std::sqrt(std::max(detz, 1e-300));
            Vector sbar = sk / rs, zbar = zk / rz;
            const double gamma = std::sqrt((1.0 + sbar.dot(zbar)) / 2.0);
            Vector jz = zbar;
            jz.tail(d - 1) = -jz.tail(d - 1);
            auto& sc = soc[k];
            sc.wbar = (sbar + jz) / (2.0 * gamma);
            sc.eta = std::sqrt(rs / rz);
            // lambda = W z = eta * Wbar z
            lambda.segment(o, d) = sc.eta * apply_wbar(k, zk, false);
        }
    }

    // Wbar v (inv=false) or Wbar^{-1} v (inv=true).
    Vector apply_wbar(std::size_t k, const Eigen::Ref<const Vector>& v, bool inv) const {
        const auto& wb = soc[k].wbar;
        const Index d = v.size();
        const double sgn = inv ? -1.0 : 1.0;
        Vector out(d);
        const auto w1 = wb.tail(d - 1);
        const auto v1 = v.tail(d - 1);
        out[0] = wb[0] * v[0] + sgn * w1.dot(v1);
        out.tail(d - 1) =
            sgn * v[0] * w1 + v1 + (w1.dot(v1) / (1.0 + wb[0])) * w1;
        return out;
    }

    Vector apply_W(const Vector& v) const {
        Vector out(lay->m);
        out.head(lay->nlp) = w_lp.array() * v.head(lay->nlp).array();
        for (std::size_t k = 0; k < lay->soc_dims.size(); ++k) {
            const Index o = lay->soc_off[k], d = lay->soc_dims[k];
            out.segment(o, d) = soc[k].eta * apply_wbar(k, v.segment(o, d), false);
        }
        return out;
    }

    Vector apply_Winv(const Vector& v) const {
        Vector out(lay->m);
        out.head(lay->nlp) = v.head(lay->nlp).array() / w_lp.array();
        for (std::size_t k = 0; k < lay->soc_dims.size(); ++k) {
            const Index o = lay->soc_off[k], d = lay->soc_dims[k];
            out.segment(o, d) = apply_wbar(k, v.segment(o, d), true) / soc[k].eta;
        }
        return out;
    }

    // Dense blocks of W^2 = W'W appended into KKT triplets at (base+o, base+o).
    void append_w2(std::vector<Triplet>& trip, Index base) const {
        for (Index i = 0; i < lay->nlp; ++i)
            trip.emplace_back(base + i, base + i, -(w_lp[i] * w_lp[i]));
        for (std::size_t k = 0; k < lay->soc_dims.size(); ++k) {
            const Index o = lay->soc_off[k], d = lay->soc_dims[k];
            const auto& wb = soc[k].wbar;
            const double e2 = soc[k].eta * soc[k].eta;
            // Wbar^2 = 2 wbar wbar' - J
            for (Index r = 0; r < d; ++r)
                for (Index cix = 0; cix < d; ++cix) {
                    double v = 2.0 * wb[r] * wb[cix];
                    if (r == cix) v -= (r == 0 ? 1.0 : -1.0);
                    if (v != 0.0)
                        trip.emplace_back(base + o + r, base + o + cix, -e2 * v);
                }
        }
    }
};

// Jordan product u o v and inverse lambda \ v per cone.
inline Vector jordan_product(const ConeLayout& lay, const Vector& u, const Vector& v) {
    Vector out(lay.m);
    out.head(lay.nlp) = u.head(lay.nlp).array() * v.head(lay.nlp).array();
    for (std::size_t k = 0; k < lay.soc_dims.size(); ++k) {
        const Index o = lay.soc_off[k], d = lay.soc_dims[k];
        const auto uk = u.segment(o, d);
        const auto vk = v.segment(o, d);
        out[o] = uk.dot(vk);
        out.segment(o + 1, d - 1) = uk[0] * vk.tail(d - 1) + vk[0] * uk.tail(d - 1);
    }
    return out;
}

inline Vector jordan_solve(const ConeLayout& lay, const Vector& lam, const Vector& v) {
    Vector out(lay.m);
    out.head(lay.nlp) = v.head(lay.nlp).array() / lam.head(lay.nlp).array();
    for (std::size_t k = 0; k < lay.soc_dims.size(); ++k) {
        const Index o = lay.soc_off[k], d = lay.soc_dims[k];
        const auto lk = lam.segment(o, d);
        const auto vk = v.segment(o, d);
        const double det = lk[0] * lk[0] - lk.tail(d - 1).squaredNorm();
        const double x0 = (lk[0] * vk[0] - lk.tail(d - 1).dot(vk.tail(d - 1))) / det;
        out[o] = x0;
        out.segment(o + 1, d - 1) = (vk.tail(d - 1) - x0 * lk.tail(d - 1)) / lk[0];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Core conelp solver on the lowered form
// ---------------------------------------------------------------------------

struct ConelpResult {
    SolveStatus status = SolveStatus::numerical_failure;
    Vector x;      // primal
    Vector y;      // equality multipliers
    Vector z;      // cone multipliers
    double pobj = 0.0, dobj = 0.0;
    double rel_gap = 0.0;
    int iterations = 0;
};

class Conelp {
  public:
    Conelp(const LoweredForm& lf, const SolverSettings& st) : lf_(lf), st_(st) {}

    ConelpResult run() {
        equilibrate();
        lay_ = ConeLayout(lf_.nlp, lf_.soc_dims);
        n_ = lf_.n;
        p_ = lf_.p;
        m_ = lf_.m;

        if (m_ == 0 && p_ == 0) return no_constraints();

        build_kkt_pattern();
        if (!initialize()) return fail();

        int consecutive_tiny = 0;
        for (iter_ = 0; iter_ < st_.max_iterations; ++iter_) {
            compute_residuals();
            if (check_convergence()) return finish();

            scale_.compute(lay_, s_, z_);
            if (!factorize()) return fail();

            // constant column: K (x1,y1,z1) = (-c, b, h)
            Vector rhs1(dim_);
            rhs1 << -c_, b_, h_;
            Vector sol1 = kkt_solve(rhs1);

            const double mu = (s_.dot(z_) + tau_ * kappa_) / (lay_.degree + 1.0);

            // affine predictor
            Vector bs_aff = -jordan_product(lay_, scale_.lambda, scale_.lambda);
            const double bk_aff = -tau_ * kappa_;
            Vector ds_aff, dxyz_aff;
            double dtau_aff, dkap_aff;
            newton_step(sol1, -rx_, -ry_, -rz_, -rtau_, bs_aff, bk_aff,
                        dxyz_aff, ds_aff, dtau_aff, dkap_aff);

            double alpha_aff = max_step_all(dxyz_aff, ds_aff, dtau_aff, dkap_aff);
            alpha_aff = std::min(1.0, alpha_aff);
            const double mu_aff = affine_mu(dxyz_aff, ds_aff, dtau_aff, dkap_aff, alpha_aff);
            double sigma = std::pow(std::max(0.0, std::min(1.0, mu_aff / mu)), 3);

            // combined corrector
            const Vector wds = scale_.apply_Winv(ds_aff);
            const Vector wdz = scale_.apply_W(dxyz_aff.tail(m_));
            Vector bs = bs_aff + sigma * mu * lay_.identity() -
                        jordan_product(lay_, wds, wdz);
            const double bk = bk_aff + sigma * mu - dtau_aff * dkap_aff;
            const double eta = 1.0 - sigma;
            Vector ds, dxyz;
            double dtau, dkap;
            newton_step(sol1, -eta * rx_, -eta * ry_, -eta * rz_, -eta * rtau_,
                        bs, bk, dxyz, ds, dtau, dkap);

            double alpha = max_step_all(dxyz, ds, dtau, dkap);
            alpha = std::min(1.0, st_.step_fraction * alpha);
            if (alpha < 1e-9) {
                if (++consecutive_tiny >= 3) break;
            } else {
                consecutive_tiny = 0;
            }

            x_ += alpha * dxyz.head(n_);
            y_ += alpha * dxyz.segment(n_, p_);
            z_ += alpha * dxyz.tail(m_);
            s_ += alpha * ds;
            tau_ += alpha * dtau;
            kappa_ += alpha * dkap;
        }
        compute_residuals();
        if (check_convergence()) return finish();
        return fail();
    }

  private:
    const LoweredForm& lf_;
    SolverSettings st_;
    ConeLayout lay_;
    Index n_ = 0, p_ = 0, m_ = 0, dim_ = 0;

    // equilibrated data
    Vector c_, b_, h_;
    SparseMatrix A_, G_;
    Vector col_scale_, arow_scale_, grow_scale_;
    double cost_scale_ = 1.0;

    // iterate
    Vector x_, y_, z_, s_;
    double tau_ = 1.0, kappa_ = 1.0;
    Vector rx_, ry_, rz_;
    double rtau_ = 0.0;
    double norm_b_ = 1.0, norm_h_ = 1.0, norm_c_ = 1.0;
    int iter_ = 0;

    NTScaling scale_;
    Eigen::SparseLU<SparseMatrix> lu_;
    SparseMatrix kkt_;
    std::vector<Triplet> base_trip_;
    bool pattern_ready_ = false;
    double reg_ = 0.0;
    ConelpResult out_;

    void equilibrate() {
        A_ = lf_.A;
        G_ = lf_.G;
        b_ = lf_.b;
        h_ = lf_.h;
        c_ = lf_.c;
        col_scale_ = Vector::Ones(lf_.n);
        arow_scale_ = Vector::Ones(lf_.p);
        grow_scale_ = Vector::Ones(lf_.m);

        ConeLayout lay(lf_.nlp, lf_.soc_dims);
        for (int sweep = 0; sweep < st_.equil_iters; ++sweep) {
            Vector cmax = Vector::Zero(lf_.n);
            Vector ar = Vector::Zero(lf_.p);
            Vector gr = Vector::Zero(lf_.m);
            for (int k = 0; k < A_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(A_, k); it; ++it) {
                    const double a = std::abs(it.value());
                    cmax[it.col()] = std::max(cmax[it.col()], a);
                    ar[it.row()] = std::max(ar[it.row()], a);
                }
            for (int k = 0; k < G_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(G_, k); it; ++it) {
                    const double a = std::abs(it.value());
                    cmax[it.col()] = std::max(cmax[it.col()], a);
                    gr[it.row()] = std::max(gr[it.row()], a);
                }
            // one factor per SOC block
            for (std::size_t k = 0; k < lay.soc_dims.size(); ++k) {
                const Index o = lay.soc_off[k], d = lay.soc_dims[k];
                const double t = gr.segment(o, d).maxCoeff();
                gr.segment(o, d).setConstant(t);
            }
            auto fac = [](double v) { return v < 1e-12 ? 1.0 : std::sqrt(v); };
            for (Index i = 0; i < lf_.n; ++i) cmax[i] = fac(cmax[i]);
            for (Index i = 0; i < lf_.p; ++i) ar[i] = fac(ar[i]);
            for (Index i = 0; i < lf_.m; ++i) gr[i] = fac(gr[i]);
            for (int k = 0; k < A_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(A_, k); it; ++it)
                    it.valueRef() /= ar[it.row()] * cmax[it.col()];
            for (int k = 0; k < G_.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(G_, k); it; ++it)
                    it.valueRef() /= gr[it.row()] * cmax[it.col()];
            b_.array() /= ar.array();
            h_.array() /= gr.array();
            c_.array() /= cmax.array();
            col_scale_.array() *= cmax.array();
            arow_scale_.array() *= ar.array();
            grow_scale_.array() *= gr.array();
        }
        cost_scale_ = std::max(1.0, inf_norm(c_));
        c_ /= cost_scale_;
        norm_b_ = std::max(1.0, inf_norm(b_));
        norm_h_ = std::max(1.0, inf_norm(h_));
        norm_c_ = std::max(1.0, inf_norm(c_));
    }

    void build_kkt_pattern() {
        dim_ = n_ + p_ + m_;
        base_trip_.clear();
        for (Index i = 0; i < dim_; ++i) base_trip_.emplace_back(i, i, 0.0);
        for (int k = 0; k < A_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(A_, k); it; ++it) {
                base_trip_.emplace_back(n_ + it.row(), it.col(), it.value());
                base_trip_.emplace_back(it.col(), n_ + it.row(), it.value());
            }
        for (int k = 0; k < G_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(G_, k); it; ++it) {
                base_trip_.emplace_back(n_ + p_ + it.row(), it.col(), it.value());
                base_trip_.emplace_back(it.col(), n_ + p_ + it.row(), it.value());
            }
        pattern_ready_ = false;
    }

    bool factorize() {
        reg_ = st_.static_reg;
        for (int attempt = 0; attempt < 4; ++attempt) {
            std::vector<Triplet> trip = base_trip_;
            for (Index i = 0; i < n_; ++i) trip.emplace_back(i, i, reg_);
            for (Index i = 0; i < p_; ++i) trip.emplace_back(n_ + i, n_ + i, -reg_);
            for (Index i = 0; i < m_; ++i)
                trip.emplace_back(n_ + p_ + i, n_ + p_ + i, -reg_);
            scale_.append_w2(trip, n_ + p_);
            kkt_ = sparse_from_triplets(dim_, dim_, trip);
            if (!pattern_ready_) {
                lu_.analyzePattern(kkt_);
                pattern_ready_ = true;
            }
            lu_.factorize(kkt_);
            if (lu_.info() == Eigen::Success) return true;
            reg_ *= 100.0;
            pattern_ready_ = false;  // regularization may change the pattern
        }
        return false;
    }

    // Apply the exact (unregularized) KKT operator.
    Vector kkt_apply(const Vector& v) const {
        Vector out = Vector::Zero(dim_);
        const auto vx = v.head(n_);
        const auto vy = v.segment(n_, p_);
        const auto vz = v.tail(m_);
        out.head(n_) = A_.transpose() * vy + G_.transpose() * vz;
        out.segment(n_, p_) = A_ * vx;
        Vector w2vz = scale_.apply_W(scale_.apply_W(vz));
        out.tail(m_) = G_ * vx - w2vz;
        return out;
    }

    Vector kkt_solve(const Vector& rhs) {
        Vector sol = lu_.solve(rhs);
        for (int r = 0; r < st_.refine_steps; ++r) {
            Vector resid = rhs - kkt_apply(sol);
            sol += lu_.solve(resid);
        }
        return sol;
    }

    bool initialize() {
        // identity scaling for the init solves
        s_ = lay_.identity();
        z_ = lay_.identity();
        scale_.compute(lay_, s_, z_);
        if (!factorize()) return false;

        // primal: min ||s|| s.t. Ax=b, Gx+s=h
        Vector rhs(dim_);
        rhs << Vector::Zero(n_), b_, h_;
        Vector sol = kkt_solve(rhs);
        x_ = sol.head(n_);
        Vector s_cand = -sol.tail(m_);
        double viol = lay_.max_violation(s_cand);
        s_ = (viol < 0.0) ? s_cand : s_cand + (1.0 + viol) * lay_.identity();

        // dual: min ||z|| s.t. A'y + G'z = -c
        rhs << -c_, Vector::Zero(p_), Vector::Zero(m_);
        sol = kkt_solve(rhs);
        y_ = sol.segment(n_, p_);
        Vector z_cand = sol.tail(m_);
        viol = lay_.max_violation(z_cand);
        z_ = (viol < 0.0) ? z_cand : z_cand + (1.0 + viol) * lay_.identity();

        tau_ = 1.0;
        kappa_ = 1.0;
        return true;
    }

    void compute_residuals() {
        rx_ = A_.transpose() * y_ + G_.transpose() * z_ + c_ * tau_;
        ry_ = -A_ * x_ + b_ * tau_;
        rz_ = -G_ * x_ + h_ * tau_ - s_;
        rtau_ = -c_.dot(x_) - b_.dot(y_) - h_.dot(z_) - kappa_;
    }

    // Solves the Newton system given the constant column sol1 and the
    // residual right-hand sides; returns (dx,dy,dz), ds, dtau, dkappa.
    void newton_step(const Vector& sol1, const Vector& bx, const Vector& by,
                     const Vector& bz, double btau, const Vector& bs, double bkap,
                     Vector& dxyz, Vector& ds, double& dtau, double& dkap) {
        const Vector wlbs = scale_.apply_W(jordan_solve(lay_, scale_.lambda, bs));
        Vector rhs(dim_);
        rhs << bx, -by, -(bz + wlbs);
        const Vector sol2 = kkt_solve(rhs);

        const auto u_x = sol2.head(n_);
        const auto u_y = sol2.segment(n_, p_);
        const auto u_z = sol2.tail(m_);
        const auto v_x = sol1.head(n_);
        const auto v_y = sol1.segment(n_, p_);
        const auto v_z = sol1.tail(m_);

        const double num = btau + bkap / tau_ + c_.dot(u_x) + b_.dot(u_y) + h_.dot(u_z);
        const double den = kappa_ / tau_ - c_.dot(v_x) - b_.dot(v_y) - h_.dot(v_z);
        dtau = num / den;
        dxyz = sol2 + dtau * sol1;
        ds = wlbs - scale_.apply_W(scale_.apply_W(dxyz.tail(m_)));
        dkap = (bkap - kappa_ * dtau) / tau_;
    }

    double max_step_all(const Vector& dxyz, const Vector& ds, double dtau,
                        double dkap) const {
        double alpha = lay_.max_step(s_, ds, kInf);
        alpha = std::min(alpha, lay_.max_step(z_, dxyz.tail(m_), kInf));
        if (dtau < 0.0) alpha = std::min(alpha, -tau_ / dtau);
        if (dkap < 0.0) alpha = std::min(alpha, -kappa_ / dkap);
        return alpha;
    }

    double affine_mu(const Vector& dxyz, const Vector& ds, double dtau,
                     double dkap, double alpha) const {
        const Vector s2 = s_ + alpha * ds;
        const Vector z2 = z_ + alpha * dxyz.tail(m_);
        const double t2 = tau_ + alpha * dtau;
        const double k2 = kappa_ + alpha * dkap;
        return (s2.dot(z2) + t2 * k2) / (lay_.degree + 1.0);
    }

    bool check_convergence() {
        const double pcost = c_.dot(x_) / tau_;
        const double dcost = -(b_.dot(y_) + h_.dot(z_)) / tau_;
        const double gap = std::abs(pcost - dcost) / std::max({1.0, std::abs(pcost), std::abs(dcost)});
        const double pres = std::max(inf_norm(ry_) / norm_b_, inf_norm(rz_) / norm_h_) / tau_;
        const double dres = inf_norm(rx_) / (norm_c_ * tau_);
        if (pres <= st_.tol && dres <= st_.tol && gap <= st_.tol) {
            out_.status = SolveStatus::optimal;
            out_.rel_gap = gap;
            return true;
        }
        // infeasibility certificates
        const double by_hz = b_.dot(y_) + h_.dot(z_);
        if (by_hz < -1e-12) {
            const Vector cert = A_.transpose() * y_ + G_.transpose() * z_;
            if (inf_norm(cert) <= st_.tol * (-by_hz) &&
                tau_ <= 1e-6 * std::max(1.0, kappa_)) {
                out_.status = SolveStatus::infeasible;
                return true;
            }
        }
        const double cx = c_.dot(x_);
        if (cx < -1e-12) {
            const double r1 = inf_norm(A_ * x_);
            const double r2 = inf_norm(G_ * x_ + s_);
            if (std::max(r1, r2) <= st_.tol * (-cx) &&
                tau_ <= 1e-6 * std::max(1.0, kappa_)) {
                out_.status = SolveStatus::unbounded;
                return true;
            }
        }
        return false;
    }

    ConelpResult no_constraints() {
        out_.iterations = 0;
        if (inf_norm(c_) == 0.0) {
            out_.status = SolveStatus::optimal;
            out_.x = Vector::Zero(n_);
            out_.y = Vector(0);
            out_.z = Vector(0);
            out_.pobj = out_.dobj = 0.0;
        } else {
            out_.status = SolveStatus::unbounded;
        }
        return out_;
    }

    ConelpResult finish() {
        out_.iterations = iter_;
        unscale();
        return out_;
    }

    ConelpResult fail() {
        out_.status = SolveStatus::numerical_failure;
        out_.iterations = iter_;
        unscale();
        return out_;
    }

    void unscale() {
        const double t = (tau_ > 0.0) ? tau_ : 1.0;
        out_.x = col_scale_.asDiagonal() * (x_ / t);
        out_.y = cost_scale_ * (arow_scale_.asDiagonal().inverse() * (y_ / t));
        out_.z = cost_scale_ * (grow_scale_.asDiagonal() * (z_ / t));
        out_.pobj = lf_.c.dot(out_.x);
        out_.dobj = -lf_.b.dot(out_.y) - lf_.h.dot(out_.z);
        out_.rel_gap = std::abs(out_.pobj - out_.dobj) /
                       std::max({1.0, std::abs(out_.pobj), std::abs(out_.dobj)});
    }
};

}  // namespace detail

/// Solves a ConicProgram. Status `optimal` guarantees primal and dual
/// feasibility within tol and a relative gap <= tol; duals are returned per
/// cone in template order and are ball-projected so ||u_j|| <= mu_j exactly.
inline ConicSolution solve(const ConicProgram& prog, const SolverSettings& settings) {
    if (settings.tol <= 0.0) throw std::invalid_argument("solve: tol must be > 0");
    const detail::LoweredForm lf = detail::lower(prog);

    // quick reject: constant rows that can never hold
    for (std::size_t j = 0; j < prog.cones.size(); ++j) {
        const auto& cb = prog.cones[j];
        if (cb.is_affine() && detail::inf_norm(cb.d) == 0.0 && cb.f_bar < 0.0) {
            ConicSolution sol;
            sol.status = SolveStatus::infeasible;
            return sol;
        }
    }

    detail::Conelp core(lf, settings);
    detail::ConelpResult res = core.run();

    ConicSolution sol;
    sol.status = res.status;
    sol.iterations = res.iterations;
    sol.gap = res.rel_gap;
    if (res.status != SolveStatus::optimal) return sol;

    sol.y = res.x;
    sol.objective_value = res.pobj;
    sol.duals.resize(prog.cones.size());
    for (std::size_t j = 0; j < prog.cones.size(); ++j) {
        const auto& ref = lf.cone_map[j];
        ConeDual& cd = sol.duals[j];
        switch (ref.kind) {
            case detail::ConeKind::lp_row:
                cd.mu = std::max(0.0, res.z[ref.idx]);
                cd.u = Vector(0);
                break;
            case detail::ConeKind::eq_pos:
                cd.mu = std::max(0.0, -res.y[ref.idx]);
                cd.u = Vector(0);
                break;
            case detail::ConeKind::eq_neg:
                cd.mu = std::max(0.0, res.y[ref.idx]);
                cd.u = Vector(0);
                break;
            case detail::ConeKind::soc_block: {
                const Index d = 1 + prog.cones[j].rows();
                cd.mu = std::max(0.0, res.z[ref.idx]);
                cd.u = res.z.segment(ref.idx + 1, d - 1);
                const double un = cd.u.norm();
                if (un > cd.mu) cd.u *= (cd.mu > 0.0 ? cd.mu / un : 0.0);
                break;
            }
        }
    }
    return sol;
}

inline ConicSolution solve(const ConicProgram& prog, double tol = 1e-8) {
    SolverSettings st;
    st.tol = tol;
    return solve(prog, st);
}

}  // namespace pevplan::conic
