#include <cmath>
#include <stdexcept>

#include "polarlab/so3_testbed.hpp"

namespace polarlab {

namespace {

Eigen::Index dot_features(Eigen::Index m) { return m * (m + 1) / 2; }

Matrix gaussian_init(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  return gaussian_matrix(rows, cols, rng) / std::sqrt(static_cast<double>(fan_in));
}

// Smooth bounded activation used inside the message MLP: x / sqrt(1 + x^2).
// Its derivative is (1 - h^2)^(3/2) in terms of the output h.
Matrix isru(const Matrix& x) { return (x.array() / (1.0 + x.array().square()).sqrt()).matrix(); }

// Pair-sized scratch reused across calls on the same thread.
struct PairScratch {
  Matrix pre, out, weighted, dout, dh, dpre;
};
PairScratch& pair_scratch() {
  thread_local PairScratch scratch;
  return scratch;
}

double radial_center(int k) { return kRadialMax * k / (kRadialBasis - 1); }

}  // namespace

// ---------------------------------------------------------------------------
// Data

double compute_target(const Matrix& points) {
  if (points.rows() < 1 || points.cols() != 3) throw ShapeMismatch("compute_target: expected N x 3 points");
  const Eigen::Matrix3d gram = points.transpose() * points / static_cast<double>(points.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(gram, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().maxCoeff();
}

std::vector<PointCloud> generate_dataset(int n_clouds, int n_points, Rng& rng) {
  if (n_points < 3) throw ShapeMismatch("generate_dataset: need at least 3 points per cloud");
  if (n_clouds < 0) throw ShapeMismatch("generate_dataset: negative cloud count");
  std::vector<PointCloud> out;
  out.reserve(static_cast<std::size_t>(n_clouds));
  const double sigma = 1.0 / std::sqrt(3.0);
  for (int c = 0; c < n_clouds; ++c) {
    Matrix x = gaussian_matrix(n_points, 3, rng) * sigma;
    x *= rng.uniform(0.5, 2.0);
    const double target = compute_target(x);
    out.push_back({std::move(x), target});
  }
  return out;
}

Matrix rotate_points(const Matrix& points, const Matrix& rotation) {
  return points * rotation.transpose();
}

Matrix random_rotation(Rng& rng) {
  Matrix r = haar_orthogonal(3, rng);
  if (r.determinant() < 0.0) r.col(0) = -r.col(0);
  return r;
}

// ---------------------------------------------------------------------------
// Model structure

So3Model So3Model::create(int hidden_channels, int n_layers, Rng& rng) {
  if (hidden_channels < 1) throw ShapeMismatch("So3Model: hidden_channels must be >= 1");
  if (n_layers < 0) throw ShapeMismatch("So3Model: n_layers must be >= 0");
  So3Model model;
  model.hidden_channels = hidden_channels;
  const Eigen::Index m = hidden_channels;
  for (int k = 0; k < n_layers; ++k) {
    So3LayerParams L;
    L.m_in = k == 0 ? 1 : m;
    L.m = m;
    const Eigen::Index nd = dot_features(m);
    L.w00 = gaussian_init(m, L.m_in, L.m_in, rng);
    L.w11 = gaussian_init(m, L.m_in, L.m_in, rng);
    L.cg_w = gaussian_init(m, m + nd, m + nd, rng);
    L.cg_b = Matrix::Zero(m, 1);
    L.msg_w1 = gaussian_init(m, L.m_in + kRadialBasis, L.m_in + kRadialBasis, rng);
    L.msg_b1 = Matrix::Zero(m, 1);
    L.msg_w2 = gaussian_init(2 * m, m, m, rng);
    L.msg_b2 = Matrix::Zero(2 * m, 1);
    L.gate = Matrix::Ones(m, 1);
    model.layers.push_back(std::move(L));
  }
  const Eigen::Index last = n_layers > 0 ? m : 1;
  model.readout_w = gaussian_init(1, last, last, rng);
  model.readout_b = Matrix::Zero(1, 1);
  return model;
}

So3Model So3Model::zeros_like() const {
  So3Model z;
  z.hidden_channels = hidden_channels;
  for (const auto& L : layers) {
    So3LayerParams g;
    g.m_in = L.m_in;
    g.m = L.m;
    g.w00 = Matrix::Zero(L.w00.rows(), L.w00.cols());
    g.w11 = Matrix::Zero(L.w11.rows(), L.w11.cols());
    g.cg_w = Matrix::Zero(L.cg_w.rows(), L.cg_w.cols());
    g.cg_b = Matrix::Zero(L.cg_b.rows(), 1);
    g.msg_w1 = Matrix::Zero(L.msg_w1.rows(), L.msg_w1.cols());
    g.msg_b1 = Matrix::Zero(L.msg_b1.rows(), 1);
    g.msg_w2 = Matrix::Zero(L.msg_w2.rows(), L.msg_w2.cols());
    g.msg_b2 = Matrix::Zero(L.msg_b2.rows(), 1);
    g.gate = Matrix::Zero(L.gate.rows(), 1);
    z.layers.push_back(std::move(g));
  }
  z.readout_w = Matrix::Zero(readout_w.rows(), readout_w.cols());
  z.readout_b = Matrix::Zero(1, 1);
  return z;
}

std::vector<ParamRef> So3Model::parameters() {
  ++version_;
  std::vector<ParamRef> out;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto& L = layers[k];
    const std::string p = "layer" + std::to_string(k) + ".";
    out.push_back({p + "w00", &L.w00, 2});
    out.push_back({p + "w11", &L.w11, 2});
    out.push_back({p + "cg_proj.weight", &L.cg_w, 2});
    out.push_back({p + "cg_proj.bias", &L.cg_b, 1});
    out.push_back({p + "msg.w1", &L.msg_w1, 2});
    out.push_back({p + "msg.b1", &L.msg_b1, 1});
    out.push_back({p + "msg.w2", &L.msg_w2, 2});
    out.push_back({p + "msg.b2", &L.msg_b2, 1});
    out.push_back({p + "gate", &L.gate, 1});
  }
  out.push_back({"readout.weight", &readout_w, 2});
  out.push_back({"readout.bias", &readout_b, 0});
  return out;
}

std::size_t So3Model::parameter_count() const {
  std::size_t n = static_cast<std::size_t>(readout_w.size() + readout_b.size());
  for (const auto& L : layers) {
    n += static_cast<std::size_t>(L.w00.size() + L.w11.size() + L.cg_w.size() + L.cg_b.size() +
                                  L.msg_w1.size() + L.msg_b1.size() + L.msg_w2.size() +
                                  L.msg_b2.size() + L.gate.size());
  }
  return n;
}

ParamSplit split_parameters(So3Model& model) { return split_by_rank(model.parameters()); }

// ---------------------------------------------------------------------------
// Forward

namespace {

// Sum of consecutive row blocks of height `len`: row i of the result is the
// sum of rows [i*len, (i+1)*len) of x.
template <typename Derived>
Matrix block_row_sums(const Eigen::MatrixBase<Derived>& x, Eigen::Index blocks, Eigen::Index len) {
  Matrix out(blocks, x.cols());
  for (Eigen::Index i = 0; i < blocks; ++i) out.row(i) = x.middleRows(i * len, len).colwise().sum();
  return out;
}

void layer_forward(const So3LayerParams& L, const ForwardCache& cache, const Matrix& s_in,
                   const std::array<Matrix, 3>& v_in, LayerCache& lc) {
  const Eigen::Index n = s_in.rows();
  const Eigen::Index per = n - 1;
  const Eigen::Index m = L.m;
  const Eigen::Index mi = L.m_in;
  const Eigen::Index nd = dot_features(m);
  const double c = 1.0 / static_cast<double>(per);

  lc.s_in = s_in;
  lc.v_in = v_in;

  // Message MLP on [s_j, phi(d_ij)] for every ordered pair i != j.
  const Matrix a = s_in * L.msg_w1.leftCols(mi).transpose();
  PairScratch& ws = pair_scratch();
  Matrix& pre = ws.pre;
  pre.noalias() = cache.radial * L.msg_w1.rightCols(kRadialBasis).transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    pre.middleRows(i * per, i) += a.topRows(i);
    pre.middleRows(i * per + i, per - i) += a.bottomRows(per - i);
  }
  pre.rowwise() += L.msg_b1.col(0).transpose();
  lc.hidden = isru(pre);
  Matrix& out = ws.out;
  out.noalias() = lc.hidden * L.msg_w2.transpose();
  out.rowwise() += L.msg_b2.col(0).transpose();

  const Matrix msg = c * block_row_sums(out.leftCols(m), n, per);
  std::array<Matrix, 3> vmsg;
  for (int d = 0; d < 3; ++d) {
    Matrix& weighted = ws.weighted;
    weighted = (out.rightCols(m).array().colwise() * cache.delta[d].array()).matrix();
    vmsg[d] = c * block_row_sums(weighted, n, per);
  }

  lc.u = s_in * L.w00.transpose() + msg;

  if (L.debug_full_w11) {
    Matrix flat_in(n, 3 * mi);
    for (Eigen::Index ch = 0; ch < mi; ++ch)
      for (int d = 0; d < 3; ++d) flat_in.col(ch * 3 + d) = v_in[d].col(ch);
    const Matrix flat_out = flat_in * L.debug_full_w11->transpose();
    for (int d = 0; d < 3; ++d) {
      lc.vm[d].resize(n, m);
      for (Eigen::Index ch = 0; ch < m; ++ch) lc.vm[d].col(ch) = flat_out.col(ch * 3 + d);
      lc.vm[d] += vmsg[d];
    }
  } else {
    for (int d = 0; d < 3; ++d) lc.vm[d] = v_in[d] * L.w11.transpose() + vmsg[d];
  }

  // V0 part of V1 (x) V1: channel-pair dot products, a <= b.
  lc.dots.resize(n, nd);
  Eigen::Index idx = 0;
  for (Eigen::Index ca = 0; ca < m; ++ca) {
    for (Eigen::Index cb = ca; cb < m; ++cb, ++idx) {
      lc.dots.col(idx) = lc.vm[0].col(ca).cwiseProduct(lc.vm[0].col(cb)) +
                         lc.vm[1].col(ca).cwiseProduct(lc.vm[1].col(cb)) +
                         lc.vm[2].col(ca).cwiseProduct(lc.vm[2].col(cb));
    }
  }

  Matrix z = lc.u * L.cg_w.leftCols(m).transpose() + lc.dots * L.cg_w.rightCols(nd).transpose();
  z.rowwise() += L.cg_b.col(0).transpose();
  lc.s_act = z.array().tanh().matrix();

  lc.norms = (lc.vm[0].array().square() + lc.vm[1].array().square() + lc.vm[2].array().square())
                 .sqrt()
                 .matrix();
  const Eigen::ArrayXXd gated = lc.norms.array().rowwise() * L.gate.col(0).transpose().array();
  lc.gates = (1.0 / (1.0 + (-gated).exp())).matrix();

  const bool residual = mi == m;
  lc.s_out = residual ? Matrix(lc.s_act + s_in) : lc.s_act;
  for (int d = 0; d < 3; ++d) {
    lc.v_out[d] = lc.vm[d].cwiseProduct(lc.gates);
    if (residual) lc.v_out[d] += v_in[d];
  }
}

}  // namespace

double forward(const So3Model& model, const Matrix& points, ForwardCache& cache) {
  const Eigen::Index n = points.rows();
  if (points.cols() != 3 || n < 2) throw ShapeMismatch("forward: expected N x 3 points with N >= 2");
  if (model.readout_w.cols() != (model.layers.empty() ? 1 : model.layers.back().m))
    throw ShapeMismatch("forward: readout width does not match the last layer");

  cache.model = &model;
  cache.model_version = model.version();
  cache.n_points = n;
  const Eigen::Index per = n - 1;
  const Eigen::Index pairs = n * per;
  cache.radial.resize(pairs, kRadialBasis);
  for (auto& d : cache.delta) d.resize(pairs);
  Eigen::Index p = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const Eigen::RowVector3d dx = points.row(j) - points.row(i);
      const double dist = dx.norm();
      for (int d = 0; d < 3; ++d) cache.delta[d](p) = dx(d);
      for (int k = 0; k < kRadialBasis; ++k) {
        const double t = (dist - radial_center(k)) / kRadialWidth;
        cache.radial(p, k) = std::exp(-0.5 * t * t);
      }
      ++p;
    }
  }

  Matrix s = points.rowwise().squaredNorm();
  std::array<Matrix, 3> v;
  for (int d = 0; d < 3; ++d) v[d] = points.col(d);

  cache.layers.resize(model.layers.size());
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& L = model.layers[k];
    if (s.cols() != L.m_in) throw ShapeMismatch("forward: layer input width mismatch");
    layer_forward(L, cache, s, v, cache.layers[k]);
    s = cache.layers[k].s_out;
    v = cache.layers[k].v_out;
  }

  cache.pooled = s.colwise().mean();
  cache.prediction = (model.readout_w * cache.pooled.transpose())(0, 0) + model.readout_b(0, 0);
  return cache.prediction;
}

double predict(const So3Model& model, const Matrix& points) {
  ForwardCache cache;
  return forward(model, points, cache);
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void layer_backward(const So3LayerParams& L, const ForwardCache& cache, const LayerCache& lc,
                    const Matrix& ds_out, const std::array<Matrix, 3>& dv_out, So3LayerParams& gl,
                    Matrix& ds_in, std::array<Matrix, 3>& dv_in) {
  const Eigen::Index n = lc.s_in.rows();
  const Eigen::Index per = n - 1;
  const Eigen::Index m = L.m;
  const Eigen::Index mi = L.m_in;
  const Eigen::Index nd = dot_features(m);
  const double c = 1.0 / static_cast<double>(per);
  const bool residual = mi == m;

  if (residual) {
    ds_in = ds_out;
    dv_in = dv_out;
  } else {
    ds_in = Matrix::Zero(n, mi);
    for (auto& d : dv_in) d = Matrix::Zero(n, mi);
  }

  // Scalar path through tanh and the CG merge.
  const Matrix dz = (ds_out.array() * (1.0 - lc.s_act.array().square())).matrix();
  gl.cg_w.leftCols(m) += dz.transpose() * lc.u;
  gl.cg_w.rightCols(nd) += dz.transpose() * lc.dots;
  gl.cg_b.col(0) += dz.colwise().sum().transpose();
  const Matrix du = dz * L.cg_w.leftCols(m);
  const Matrix ddots = dz * L.cg_w.rightCols(nd);

  // Norm gate v_out = vm * sigmoid(gamma * |vm|).
  const Matrix g_sum = (dv_out[0].array() * lc.vm[0].array() + dv_out[1].array() * lc.vm[1].array() +
                        dv_out[2].array() * lc.vm[2].array())
                           .matrix();
  const Eigen::ArrayXXd dgate_pre = g_sum.array() * lc.gates.array() * (1.0 - lc.gates.array());
  gl.gate.col(0) += (dgate_pre * lc.norms.array()).matrix().colwise().sum().transpose();
  const Eigen::ArrayXXd dnorm = dgate_pre.rowwise() * L.gate.col(0).transpose().array();
  const Eigen::ArrayXXd inv_norm = (lc.norms.array() > 0.0).select(1.0 / lc.norms.array(), 0.0);
  std::array<Matrix, 3> dvm;
  for (int d = 0; d < 3; ++d) {
    dvm[d] = (dv_out[d].array() * lc.gates.array() + dnorm * inv_norm * lc.vm[d].array()).matrix();
  }

  // Dot-product features.
  Eigen::Index idx = 0;
  for (Eigen::Index ca = 0; ca < m; ++ca) {
    for (Eigen::Index cb = ca; cb < m; ++cb, ++idx) {
      const auto col = ddots.col(idx);
      for (int d = 0; d < 3; ++d) {
        dvm[d].col(ca) += col.cwiseProduct(lc.vm[d].col(cb));
        dvm[d].col(cb) += col.cwiseProduct(lc.vm[d].col(ca));
      }
    }
  }

  // Vector mixer B (x) I_3.
  for (int d = 0; d < 3; ++d) {
    gl.w11 += dvm[d].transpose() * lc.v_in[d];
    dv_in[d] += dvm[d] * L.w11;
  }

  // Scalar mixer.
  gl.w00 += du.transpose() * lc.s_in;
  ds_in += du * L.w00;

  // Messages: scalar part from du, vector part from dvm.
  const Eigen::Index pairs = n * per;
  PairScratch& ws = pair_scratch();
  Matrix& dout = ws.dout;
  dout.resize(pairs, 2 * m);
  for (Eigen::Index i = 0; i < n; ++i) {
    dout.middleRows(i * per, per).leftCols(m).rowwise() = c * du.row(i);
  }
  auto dvec = dout.rightCols(m);
  dvec.setZero();
  for (int d = 0; d < 3; ++d) {
    for (Eigen::Index i = 0; i < n; ++i) {
      dvec.middleRows(i * per, per).noalias() +=
          c * cache.delta[d].segment(i * per, per) * dvm[d].row(i);
    }
  }

  gl.msg_w2 += dout.transpose() * lc.hidden;
  gl.msg_b2.col(0) += dout.colwise().sum().transpose();
  Matrix& dh = ws.dh;
  dh.noalias() = dout * L.msg_w2;
  Matrix& dpre = ws.dpre;
  dpre = (dh.array() * (1.0 - lc.hidden.array().square()) *
          (1.0 - lc.hidden.array().square()).sqrt())
             .matrix();
  gl.msg_w1.rightCols(kRadialBasis) += dpre.transpose() * cache.radial;
  gl.msg_b1.col(0) += dpre.colwise().sum().transpose();

  Matrix da = Matrix::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    da.topRows(i) += dpre.middleRows(i * per, i);
    da.bottomRows(per - i) += dpre.middleRows(i * per + i, per - i);
  }
  gl.msg_w1.leftCols(mi) += da.transpose() * lc.s_in;
  ds_in += da * L.msg_w1.leftCols(mi);
}

}  // namespace

void backward_accumulate(const So3Model& model, const ForwardCache& cache, double d_loss,
                         So3Model& grads) {
  if (cache.model != &model || cache.model_version != model.version())
    throw StaleCache("backward: cache does not belong to the current model parameters");
  if (grads.layers.size() != model.layers.size())
    throw ShapeMismatch("backward: gradient container has the wrong layer count");
  for (const auto& L : model.layers)
    if (L.debug_full_w11) throw std::logic_error("backward: not defined for the broken-w11 control");

  const Eigen::Index n = cache.n_points;
  grads.readout_b(0, 0) += d_loss;
  grads.readout_w += d_loss * cache.pooled;

  Matrix ds = Matrix::Zero(n, model.readout_w.cols());
  ds.rowwise() = (d_loss / static_cast<double>(n)) * model.readout_w.row(0);
  std::array<Matrix, 3> dv;
  for (auto& d : dv) d = Matrix::Zero(n, model.readout_w.cols());

  for (std::size_t k = model.layers.size(); k-- > 0;) {
    Matrix ds_in;
    std::array<Matrix, 3> dv_in;
    layer_backward(model.layers[k], cache, cache.layers[k], ds, dv, grads.layers[k], ds_in, dv_in);
    ds = std::move(ds_in);
    dv = std::move(dv_in);
  }
}

So3Model backward(const So3Model& model, const ForwardCache& cache, double d_loss) {
  So3Model grads = model.zeros_like();
  backward_accumulate(model, cache, d_loss, grads);
  return grads;
}

LossValue mse_loss(double pred, double target) {
  const double r = pred - target;
  return {r * r, 2.0 * r};
}

double invariance_check(const So3Model& model, const Matrix& points, int n_rotations, Rng& rng) {
  const double base = predict(model, points);
  double worst = 0.0;
  for (int r = 0; r < n_rotations; ++r) {
    const Matrix rot = random_rotation(rng);
    const double rotated = predict(model, rotate_points(points, rot));
    worst = std::max(worst, std::abs(rotated - base) / (std::abs(base) + 1e-9));
  }
  return worst;
}

double evaluate_mse(const So3Model& model, const std::vector<PointCloud>& data) {
  if (data.empty()) return 0.0;
  ForwardCache cache;
  double acc = 0.0;
  for (const auto& cloud : data) acc += mse_loss(forward(model, cloud.points, cache), cloud.target).loss;
  return acc / static_cast<double>(data.size());
}

}  // namespace polarlab
