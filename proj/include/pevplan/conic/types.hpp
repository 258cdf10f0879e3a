#pragma once

// Standard-form second-order cone programs, parametric in a first-stage
// decision vector x. Each constraint block encodes
//
//     || B y + A x + e ||_2  <=  d'y + c'x + f
//
// where y is the second-stage (continuous) variable vector. A block with
// zero norm rows is a plain affine inequality 0 <= d'y + c'x + f. Equality
// constraints are written as two opposing affine blocks.

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace pevplan::conic {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Index = Eigen::Index;
using Triplet = Eigen::Triplet<double>;

inline SparseMatrix sparse_from_triplets(Index rows, Index cols,
                                         const std::vector<Triplet>& ts) {
    SparseMatrix m(rows, cols);
    m.setFromTriplets(ts.begin(), ts.end());
    m.makeCompressed();
    return m;
}

/// One cone block of a parametric SOCP.
struct ConeBlock {
    SparseMatrix A;  // rows x dim_x
    SparseMatrix B;  // rows x dim_y
    Vector e;        // rows
    Vector c;        // dim_x
    Vector d;        // dim_y
    double f = 0.0;

    Index rows() const { return e.size(); }
    bool is_affine() const { return e.size() == 0; }

    /// Affine inequality 0 <= d'y + c'x + f.
    static ConeBlock affine(Vector c, Vector d, double f) {
        ConeBlock b;
        b.A = SparseMatrix(0, c.size());
        b.B = SparseMatrix(0, d.size());
        b.e = Vector(0);
        b.c = std::move(c);
        b.d = std::move(d);
        b.f = f;
        return b;
    }
};

/// A parametric SOCP: min_y objective_y'y subject to the cone blocks,
/// with the first-stage vector x left symbolic.
struct ConicTemplate {
    Vector objective_y;
    std::vector<ConeBlock> cones;
    Index dim_x = 0;
    Index dim_y = 0;
    std::string label;

    void validate() const {
        if (objective_y.size() != dim_y)
            throw std::invalid_argument("template '" + label +
                                        "': objective length != dim_y");
        for (std::size_t j = 0; j < cones.size(); ++j) {
            const auto& cb = cones[j];
            const std::string where =
                "template '" + label + "' cone " + std::to_string(j);
            if (cb.A.cols() != dim_x || cb.c.size() != dim_x)
                throw std::invalid_argument(where + ": x-dimension mismatch");
            if (cb.B.cols() != dim_y || cb.d.size() != dim_y)
                throw std::invalid_argument(where + ": y-dimension mismatch");
            if (cb.A.rows() != cb.rows() || cb.B.rows() != cb.rows())
                throw std::invalid_argument(where + ": norm row counts disagree");
        }
    }
};

/// A cone block with the first-stage contribution folded in:
/// || B y + e_bar || <= d'y + f_bar.
struct InstantiatedCone {
    SparseMatrix B;
    Vector d;
    Vector e_bar;
    double f_bar = 0.0;

    Index rows() const { return e_bar.size(); }
    bool is_affine() const { return e_bar.size() == 0; }
};

/// A concrete SOCP over y alone (no remaining x dependence).
struct ConicProgram {
    Vector objective;
    std::vector<InstantiatedCone> cones;
    Index dim_y = 0;
    std::string label;

    void validate() const {
        if (objective.size() != dim_y)
            throw std::invalid_argument("program '" + label +
                                        "': objective length != dim_y");
        for (std::size_t j = 0; j < cones.size(); ++j) {
            const auto& cb = cones[j];
            if (cb.B.cols() != dim_y || cb.d.size() != dim_y ||
                cb.B.rows() != cb.rows())
                throw std::invalid_argument("program '" + label + "' cone " +
                                            std::to_string(j) +
                                            ": dimension mismatch");
        }
    }
};

enum class SolveStatus : std::uint8_t {
    optimal,
    infeasible,
    unbounded,
    numerical_failure,
};

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return "optimal";
        case SolveStatus::infeasible: return "infeasible";
        case SolveStatus::unbounded: return "unbounded";
        case SolveStatus::numerical_failure: return "numerical_failure";
    }
    return "?";
}

/// Dual multipliers of one cone: mu >= ||u||. For an affine block u is empty.
struct ConeDual {
    double mu = 0.0;
    Vector u;
};

struct ConicSolution {
    SolveStatus status = SolveStatus::numerical_failure;
    Vector y;
    double objective_value = 0.0;
    std::vector<ConeDual> duals;  // one per cone, template order
    double gap = 0.0;             // relative primal-dual gap at exit
    int iterations = 0;

    bool optimal() const { return status == SolveStatus::optimal; }
};

/// Folds a fixed first-stage decision into a template:
/// e_bar = A x_hat + e, f_bar = c'x_hat + f per cone.
inline ConicProgram instantiate(const ConicTemplate& tpl, const Vector& x_hat) {
    if (x_hat.size() != tpl.dim_x)
        throw std::invalid_argument("instantiate: x_hat length " +
                                    std::to_string(x_hat.size()) +
                                    " != dim_x " + std::to_string(tpl.dim_x));
    ConicProgram prog;
    prog.objective = tpl.objective_y;
    prog.dim_y = tpl.dim_y;
    prog.label = tpl.label;
    prog.cones.reserve(tpl.cones.size());
    for (const auto& cb : tpl.cones) {
        InstantiatedCone ic;
        ic.B = cb.B;
        ic.d = cb.d;
        ic.e_bar = cb.A * x_hat + cb.e;
        ic.f_bar = cb.c.dot(x_hat) + cb.f;
        prog.cones.push_back(std::move(ic));
    }
    return prog;
}

/// Evaluates sum_j -u_j'(A_j x + e_j) - mu_j (c_j'x + f_j); affine in x.
inline double dual_objective_at(const std::vector<ConeDual>& duals,
                                const ConicTemplate& tpl, const Vector& x) {
    if (duals.size() != tpl.cones.size())
        throw std::invalid_argument("dual_objective_at: one dual per cone required");
    if (x.size() != tpl.dim_x)
        throw std::invalid_argument("dual_objective_at: x length != dim_x");
    double total = 0.0;
    for (std::size_t j = 0; j < tpl.cones.size(); ++j) {
        const auto& cb = tpl.cones[j];
        const auto& dj = duals[j];
        if (dj.u.size() != cb.rows())
            throw std::invalid_argument("dual_objective_at: u size mismatch at cone " +
                                        std::to_string(j));
        if (cb.rows() > 0)
            total -= dj.u.dot(cb.A * x + cb.e);
        total -= dj.mu * (cb.c.dot(x) + cb.f);
    }
    return total;
}

namespace detail {
inline void dump_coords(std::ostream& os, const char* name, const SparseMatrix& m) {
    os << "  " << name << " (" << m.rows() << "x" << m.cols() << "):\n";
    for (int k = 0; k < m.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(m, k); it; ++it)
            os << "    " << it.row() << " " << it.col() << " " << it.value() << "\n";
}
inline void dump_vec(std::ostream& os, const char* name, const Vector& v) {
    os << "  " << name << ":";
    for (Index i = 0; i < v.size(); ++i) os << " " << v[i];
    os << "\n";
}
}  // namespace detail

/// Debug listing: objective, then one cone per block in coordinate form.
inline void dump(const ConicProgram& prog, std::ostream& os) {
    os << "program '" << prog.label << "' dim_y=" << prog.dim_y << "\n";
    detail::dump_vec(os, "objective", prog.objective);
    for (std::size_t j = 0; j < prog.cones.size(); ++j) {
        const auto& cb = prog.cones[j];
        os << "cone " << j << (cb.is_affine() ? " (affine)" : "") << "\n";
        detail::dump_coords(os, "B", cb.B);
        detail::dump_vec(os, "d", cb.d);
        detail::dump_vec(os, "e", cb.e_bar);
        os << "  f: " << cb.f_bar << "\n";
    }
}

}  // namespace pevplan::conic
