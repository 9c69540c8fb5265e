#include <doctest.h>

#include <numeric>

#include "support.hpp"

using namespace testing;

namespace {

// Layout sizes recomputed by walking the offsets in order.
Index enumerate_layout(const MlpArchitecture& arch) {
  const ParamLayout layout = param_layout(arch);
  Index cursor = 0;
  for (std::size_t l = 0; l < layout.layers.size(); ++l) {
    const LayerLayout& L = layout.layers[l];
    CHECK(L.in == arch.layer_widths[l]);
    CHECK(L.out == arch.layer_widths[l + 1]);
    CHECK(L.weight == cursor);
    cursor += static_cast<Index>(L.in) * L.out;
    CHECK(L.bias == cursor);
    cursor += L.out;
    if (arch.is_normalized(static_cast<int>(l))) {
      CHECK(L.gn_scale == cursor);
      cursor += L.out;
      CHECK(L.gn_shift == cursor);
      cursor += L.out;
    } else {
      CHECK(L.gn_scale == -1);
      CHECK(L.gn_shift == -1);
    }
  }
  return cursor;
}

double direct_loglik(const Matrix& f, const Matrix& y, const LikelihoodSpec& lik) {
  double total = 0.0;
  for (Index i = 0; i < f.rows(); ++i) {
    for (Index j = 0; j < f.cols(); ++j) {
      if (lik.kind == LikelihoodSpec::Kind::gaussian) {
        const double r = y(i, j) - f(i, j);
        total += -0.5 * std::log(2.0 * M_PI * lik.sigma * lik.sigma) - r * r / (2.0 * lik.sigma * lik.sigma);
      } else {
        double norm = 0.0;
        for (Index k = 0; k < f.cols(); ++k) norm += std::exp(f(i, k));
        total += y(i, j) * (f(i, j) - std::log(norm));
      }
    }
  }
  return total;
}

LikelihoodSpec lik_for(const MlpArchitecture& a) {
  return a.task == Task::regression ? LikelihoodSpec::gaussian(0.3) : LikelihoodSpec::categorical();
}

}  // namespace

TEST_CASE("param_count of a tiny net is the direct count") {
  MlpArchitecture a{{1, 2, 1}, Activation::swish, std::nullopt, Task::regression};
  CHECK(param_count(a) == 7);
}

TEST_CASE("param_count agrees with layout enumeration for both presets") {
  for (const MlpArchitecture& a : {MlpArchitecture::regression_mlp(), MlpArchitecture::classification_mlp()}) {
    const Index enumerated = enumerate_layout(a);
    CHECK(param_count(a) == enumerated);
    CHECK(param_layout(a).size == enumerated);
  }
  CHECK(param_count(MlpArchitecture::regression_mlp()) == 2 * 128 + 2 * (128 * 128 + 128) + 129);
  CHECK(param_count(MlpArchitecture::classification_mlp()) == 2 * 50 + 50 + 2 * (50 * 50 + 50) + 50 * 2 + 2 + 4 * 50);
}

TEST_CASE("architecture validation") {
  MlpArchitecture a{{3}, Activation::relu, std::nullopt, Task::regression};
  CHECK_THROWS_AS(a.validate(), InvalidArgument);
  MlpArchitecture b{{2, 5, 2}, Activation::relu, GroupNormSpec{2, 1e-5}, Task::classification};
  CHECK_THROWS_AS(b.validate(), InvalidArgument);
}

TEST_CASE("init_params is deterministic with zero biases and He variance") {
  const MlpArchitecture a = MlpArchitecture::regression_mlp();
  const ParamVector p1 = init_params(a, 42);
  const ParamVector p2 = init_params(a, 42);
  CHECK((p1.array() == p2.array()).all());
  CHECK((p1.array() != init_params(a, 43).array()).any());
  const ParamLayout layout = param_layout(a);
  for (const LayerLayout& L : layout.layers) CHECK(p1.segment(L.bias, L.out).isZero(0.0));
  const LayerLayout& mid = layout.layers[1];
  const Vector block = p1.segment(mid.weight, 128 * 128);
  const double mean = block.mean();
  const double var = (block.array() - mean).square().mean();
  CHECK(var == doctest::Approx(2.0 / 128).epsilon(0.3));

  const MlpArchitecture c = MlpArchitecture::classification_mlp();
  const ParamVector pc = init_params(c, 1);
  for (const LayerLayout& L : param_layout(c).layers) {
    if (L.gn_scale < 0) continue;
    CHECK((pc.segment(L.gn_scale, L.out).array() == 1.0).all());
    CHECK(pc.segment(L.gn_shift, L.out).isZero(0.0));
  }
}

TEST_CASE("forward of a zero linear map is zero") {
  MlpArchitecture a{{3, 2}, Activation::swish, std::nullopt, Task::regression};
  Gen g(1);
  const Matrix out = forward(a, ParamVector::Zero(param_count(a)), g.matrix(5, 3));
  CHECK(out.isZero(0.0));
}

TEST_CASE("swish at zero pre-activation is zero") {
  // one hidden unit with zero bias and zero input weight; output weight 1
  MlpArchitecture a{{1, 1, 1}, Activation::swish, std::nullopt, Task::regression};
  ParamVector p = ParamVector::Zero(param_count(a));
  const ParamLayout L = param_layout(a);
  p[L.layers[1].weight] = 1.0;
  Matrix x(1, 1);
  x << 3.7;
  CHECK(forward(a, p, x)(0, 0) == 0.0);
  // swish(1) = 1 * sigmoid(1) through the same path with input weight 1
  p[L.layers[0].weight] = 1.0;
  x(0, 0) = 1.0;
  CHECK(forward(a, p, x)(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("group normalization yields zero mean and unit variance per group") {
  Gen g(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int groups = g.integer(1, 3);
    const int per = g.integer(2, 6);
    const Matrix x = g.matrix(4, groups * per, g.uniform(0.1, 10.0)).array() + g.uniform(-5, 5);
    const double eps = 1e-5;
    const Matrix xh = group_normalize(x, groups, eps);
    for (Index i = 0; i < x.rows(); ++i) {
      for (int k = 0; k < groups; ++k) {
        const Eigen::RowVectorXd seg = xh.row(i).segment(k * per, per);
        const Eigen::RowVectorXd raw = x.row(i).segment(k * per, per);
        const double raw_var = (raw.array() - raw.mean()).square().mean();
        const double var = (seg.array() - seg.mean()).square().mean();
        CHECK(std::abs(seg.mean()) <= 1e-10);
        // pre-affine variance is raw_var / (raw_var + eps)
        CHECK(std::abs(var - raw_var / (raw_var + eps)) <= 1e-8);
      }
    }
  }
  Matrix two(1, 2);
  two << 1.0, 3.0;
  const Matrix n = group_normalize(two, 1, 1e-5);
  CHECK(n(0, 0) + n(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(n(0, 1) == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
}

TEST_CASE("log_likelihood examples") {
  MlpArchitecture a{{1, 1}, Activation::swish, std::nullopt, Task::regression};
  ParamVector p(2);
  p << 2.0, 0.5;  // f(x) = 2x + 0.5
  Matrix x(1, 1), y(1, 1);
  x << 1.0;
  y << 2.5;
  CHECK(log_likelihood(a, p, x, y, LikelihoodSpec::gaussian(1.0)) == doctest::Approx(-0.5 * std::log(2 * M_PI)));
  CHECK(grad_params(a, p, x, y, LikelihoodSpec::gaussian(1.0)).isZero(0.0));
  CHECK(grad_data(a, p, x, y, LikelihoodSpec::gaussian(1.0)).targets.isZero(0.0));

  MlpArchitecture c{{2, 2}, Activation::relu, std::nullopt, Task::classification};
  const ParamVector zero = ParamVector::Zero(param_count(c));
  Matrix xc(1, 2), yc(1, 2);
  xc << 0.3, -1.0;
  yc << 0.0, 1.0;
  CHECK(log_likelihood(c, zero, xc, yc, LikelihoodSpec::categorical()) == doctest::Approx(std::log(0.5)));
  yc << 0.2, 0.7;
  CHECK_THROWS_AS(log_likelihood(c, zero, xc, yc, LikelihoodSpec::categorical()), InvalidArgument);
  CHECK_THROWS_AS(LikelihoodSpec::gaussian(0.0).validate(), InvalidArgument);
}

TEST_CASE("log_likelihood matches a per-point density sum") {
  Gen g(11);
  for (int trial = 0; trial < 50; ++trial) {
    const bool cls = trial % 2 == 1;
    const MlpArchitecture a = g.arch(cls);
    const LikelihoodSpec lik = lik_for(a);
    const ParamVector p = init_params(a, trial);
    const Matrix x = g.matrix(g.integer(1, 7), a.input_dim());
    const Matrix y = cls ? g.soft_labels(x.rows(), a.output_dim()) : g.matrix(x.rows(), a.output_dim());
    const double ll = log_likelihood(a, p, x, y, lik);
    CHECK(ll == doctest::Approx(direct_loglik(forward(a, p, x), y, lik)).epsilon(1e-12));
    double singles = 0.0;
    for (Index i = 0; i < x.rows(); ++i) singles += log_likelihood(a, p, x.row(i), y.row(i), lik);
    CHECK(ll == doctest::Approx(singles).epsilon(1e-12));
  }
}

TEST_CASE("rows are processed independently and permutation equivariantly") {
  Gen g(12);
  for (int trial = 0; trial < 20; ++trial) {
    const bool cls = trial % 2 == 0;
    const MlpArchitecture a = g.arch(cls);
    const LikelihoodSpec lik = lik_for(a);
    const ParamVector p = init_params(a, 100 + trial);
    const Index n = g.integer(2, 8);
    const Matrix x = g.matrix(n, a.input_dim());
    const Matrix y = cls ? g.one_hot(n, a.output_dim()) : g.matrix(n, a.output_dim());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.rng);
    Matrix xp(n, x.cols()), yp(n, y.cols());
    for (Index i = 0; i < n; ++i) {
      xp.row(i) = x.row(perm[i]);
      yp.row(i) = y.row(perm[i]);
    }
    const Matrix f = forward(a, p, x);
    const Matrix fp = forward(a, p, xp);
    const DataGradient gd = grad_data(a, p, x, y, lik);
    const DataGradient gp = grad_data(a, p, xp, yp, lik);
    for (Index i = 0; i < n; ++i) {
      CHECK((fp.row(i) - f.row(perm[i])).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((gp.inputs.row(i) - gd.inputs.row(perm[i])).cwiseAbs().maxCoeff() <= 1e-12);
    }
    CHECK(log_likelihood(a, p, xp, yp, lik) == doctest::Approx(log_likelihood(a, p, x, y, lik)).epsilon(1e-13));
  }
}

TEST_CASE("flipping the gaussian residual flips the data-term gradient") {
  Gen g(13);
  const MlpArchitecture a = g.arch(false);
  const ParamVector p = init_params(a, 5);
  const Matrix x = g.matrix(4, a.input_dim());
  const Matrix f = forward(a, p, x);
  const Matrix r = g.matrix(4, a.output_dim());
  const LikelihoodSpec lik = LikelihoodSpec::gaussian(0.5);
  const ParamVector up = grad_params(a, p, x, f + r, lik);
  const ParamVector down = grad_params(a, p, x, f - r, lik);
  CHECK((up + down).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, up.cwiseAbs().maxCoeff()));
}

TEST_CASE("categorical label gradient is the log-softmax") {
  Gen g(14);
  const MlpArchitecture a = g.arch(true);
  const ParamVector p = init_params(a, 9);
  const Matrix x = g.matrix(5, a.input_dim());
  const Matrix y = g.soft_labels(5, a.output_dim());
  const DataGradient gd = grad_data(a, p, x, y, LikelihoodSpec::categorical());
  const Matrix ls = log_softmax(forward(a, p, x));
  CHECK((gd.targets - ls).cwiseAbs().maxCoeff() == 0.0);
}

// Max relative error of analytic vs central-difference gradients over every
// coordinate, with the floor scaled to the largest gradient entry so that
// near-cancelling coordinates are not judged on roundoff alone.
struct FdReport {
  double params = 0.0;
  double inputs = 0.0;
  double targets = 0.0;
};

static FdReport fd_check(const MlpArchitecture& a, const ParamVector& p, const Matrix& x, const Matrix& y,
                         const LikelihoodSpec& lik) {
  const double h = 1e-5;
  FdReport rep;
  const ParamVector gp = grad_params(a, p, x, y, lik);
  const DataGradient gd = grad_data(a, p, x, y, lik);
  const double floor = 1e-3 * std::max({gp.cwiseAbs().maxCoeff(), gd.inputs.cwiseAbs().maxCoeff(), 1e-5});
  auto rel_err = [floor](double u, double v) { return testing::rel_err(u, v, floor); };
  auto fp = [&](const Vector& v) { return log_likelihood(a, v, x, y, lik); };
  for (Index i = 0; i < p.size(); ++i) rep.params = std::max(rep.params, rel_err(gp[i], central_diff(fp, p, i, h)));
  auto fx = [&](const Vector& v) { return log_likelihood(a, p, unflatten(v, x.rows(), x.cols()), y, lik); };
  const Vector gx = flatten(gd.inputs);
  for (Index i = 0; i < gx.size(); ++i) {
    rep.inputs = std::max(rep.inputs, rel_err(gx[i], central_diff(fx, flatten(x), i, h)));
  }
  if (lik.kind == LikelihoodSpec::Kind::gaussian) {
    auto fy = [&](const Vector& v) { return log_likelihood(a, p, x, unflatten(v, y.rows(), y.cols()), lik); };
    const Vector gy = flatten(gd.targets);
    for (Index i = 0; i < gy.size(); ++i) {
      rep.targets = std::max(rep.targets, rel_err(gy[i], central_diff(fy, flatten(y), i, h)));
    }
  } else {
    // soft labels must stay normalized: differentiate along zero-sum directions e_j - e_0
    for (Index i = 0; i < y.rows(); ++i) {
      for (Index j = 1; j < y.cols(); ++j) {
        Matrix up = y, down = y;
        up(i, j) += h;
        up(i, 0) -= h;
        down(i, j) -= h;
        down(i, 0) += h;
        const double numeric = (log_likelihood(a, p, x, up, lik) - log_likelihood(a, p, x, down, lik)) / (2 * h);
        rep.targets = std::max(rep.targets, rel_err(gd.targets(i, j) - gd.targets(i, 0), numeric));
      }
    }
  }
  return rep;
}

TEST_CASE("analytic gradients match central differences on random small nets") {
  Gen g(2024);
  for (const bool cls : {false, true}) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const MlpArchitecture a = g.arch(cls);
      const LikelihoodSpec lik = lik_for(a);
      ParamVector p = init_params(a, 1000 + trial);
      if (cls) {
        // perturb GroupNorm affine away from the identity
        p += 0.1 * standard_normal(p.size(), g.rng);
      }
      const Index n = g.integer(1, 5);
      const Matrix x = g.matrix(n, a.input_dim());
      const Matrix y = cls ? g.soft_labels(n, a.output_dim()) : g.matrix(n, a.output_dim());
      const FdReport r = fd_check(a, p, x, y, lik);
      worst = std::max({worst, r.params, r.inputs, r.targets});
    }
    INFO("family " << std::string(cls ? "relu+groupnorm" : "swish") << " worst relative error " << worst);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("non-finite parameters are reported") {
  const MlpArchitecture a = MlpArchitecture::regression_mlp();
  ParamVector p = init_params(a, 0);
  p[3] = std::numeric_limits<double>::quiet_NaN();
  Matrix x = Matrix::Zero(2, 1);
  CHECK_THROWS_AS(forward(a, p, x), NumericalError);
  CHECK_THROWS_AS(check_params(a, ParamVector::Zero(3)), InvalidArgument);
}
