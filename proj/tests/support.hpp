#pragma once

#include "llava_slt/core/autograd.hpp"
#include "llava_slt/core/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

namespace slt::testing {

inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdTol = 1e-3;

inline double rel_error(double a, double n) {
    // gradients below 1e-6 are compared absolutely
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

struct GradReport {
    double max_rel = 0;
    std::string worst;
    int checked = 0;
};

/// Central-difference check of every trainable parameter in `ps` against
/// the tape gradient of `loss(tape)`.
inline GradReport check_params(ParamStore<double>& ps, const std::function<Var<double>(Tape<double>&)>& loss,
                               double h = kFdStep) {
    ps.zero_grad();
    {
        Tape<double> t;
        t.backward(loss(t));
    }
    GradReport r;
    for (auto& [name, p] : ps) {
        if (!p.trainable) continue;
        const Matrix<double> analytic = p.grad.size() ? p.grad : Matrix<double>::Zero(p.value.rows(), p.value.cols());
        for (Index i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data()[i];
            p.value.data()[i] = orig + h;
            double fp, fm;
            {
                Tape<double> t;
                fp = loss(t).scalar();
            }
            p.value.data()[i] = orig - h;
            {
                Tape<double> t;
                fm = loss(t).scalar();
            }
            p.value.data()[i] = orig;
            const double e = rel_error(analytic.data()[i], (fp - fm) / (2 * h));
            ++r.checked;
            if (e > r.max_rel) {
                r.max_rel = e;
                r.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return r;
}

/// Same check for an input matrix fed as a tape variable.
inline GradReport check_input(Matrix<double> x, const std::function<Var<double>(Tape<double>&, Var<double>)>& loss,
                              double h = kFdStep) {
    Matrix<double> analytic;
    {
        Tape<double> t;
        Var<double> v = t.variable(x);
        t.backward(loss(t, v));
        analytic = t.has_grad(v.id) ? t.grad(v.id) : Matrix<double>::Zero(x.rows(), x.cols());
    }
    GradReport r;
    for (Index i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        const auto eval = [&](double val) {
            x.data()[i] = val;
            Tape<double> t;
            return loss(t, t.variable(x)).scalar();
        };
        const double n = (eval(orig + h) - eval(orig - h)) / (2 * h);
        x.data()[i] = orig;
        const double e = rel_error(analytic.data()[i], n);
        ++r.checked;
        if (e > r.max_rel) {
            r.max_rel = e;
            r.worst = "x[" + std::to_string(i) + "]";
        }
    }
    return r;
}

inline Matrix<double> random_matrix(Index rows, Index cols, std::uint64_t seed, double sd = 1.0) {
    Rng rng = Rng::derive({seed});
    Matrix<double> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * sd;
    return m;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() / ("llava_slt_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace slt::testing
