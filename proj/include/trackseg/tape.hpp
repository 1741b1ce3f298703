#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "trackseg/tensor.hpp"

namespace trackseg {

struct Var {
  int i = -1;
  bool ok() const { return i >= 0; }
};

// Reverse-mode tape over Tensor-valued nodes, restricted to a small audited
// primitive set. Single-owner: build a graph, call backward once, read
// gradients, then reset. With recording off the tape is a plain evaluator —
// the same kernels run in the same order, no adjoint closures are stored.
class Tape {
 public:
  explicit Tape(bool recording = true) : rec_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return rec_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  void reset() { nodes_.clear(); }

  Var leaf(Tensor v) {
    nodes_.push_back(Node{std::move(v), Tensor{}, nullptr});
    return Var{size() - 1};
  }

  const Tensor& val(Var v) const { return nodes_[v.i].val; }

  // Gradient of the last backward() root w.r.t. node v; empty if untouched.
  const Tensor& grad(Var v) const { return nodes_[v.i].grad; }

  void backward(Var root) {
    if (!rec_) throw std::logic_error("backward on a non-recording tape");
    const Tensor& r = val(root);
    if (r.rows != 1 || r.cols != 1) throw std::invalid_argument("backward: root must be scalar");
    gref(root.i) = Tensor::full(1, 1, 1.0);
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.back) n.back(*this);
    }
  }

  // ---- arithmetic ----

  Var add(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.same_shape(y), "add: shape mismatch");
    Tensor out = x;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] += y.data[k];
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      t.accum_same(ai, g);
      t.accum_same(bi, g);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.same_shape(y), "sub: shape mismatch");
    Tensor out = x;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] -= y.data[k];
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      t.accum_same(ai, g);
      Tensor& gb = t.gref(bi);
      for (std::size_t k = 0; k < g.size(); ++k) gb.data[k] -= g.data[k];
    });
  }

  Var mul(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.same_shape(y), "mul: shape mismatch");
    Tensor out = x;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] *= y.data[k];
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x2 = t.nodes_[ai].val, &y2 = t.nodes_[bi].val;
      Tensor &ga = t.gref(ai), &gb = t.gref(bi);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga.data[k] += g.data[k] * y2.data[k];
        gb.data[k] += g.data[k] * x2.data[k];
      }
    });
  }

  Var div(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.same_shape(y), "div: shape mismatch");
    Tensor out = x;
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] /= y.data[k];
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x2 = t.nodes_[ai].val, &y2 = t.nodes_[bi].val;
      Tensor &ga = t.gref(ai), &gb = t.gref(bi);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga.data[k] += g.data[k] / y2.data[k];
        gb.data[k] -= g.data[k] * x2.data[k] / (y2.data[k] * y2.data[k]);
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), [ai = a.i, c](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += c * g.data[k];
    });
  }

  Var add_const(Var a, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v += c;
    return push(std::move(out), [ai = a.i](Tape& t) { t.accum_same(ai, t.nodes_[t.cursor_].grad); });
  }

  // b broadcast against a: b may be (1 x n), (m x 1) or (1 x 1).
  Var add_bcast(Var a, Var b) { return bcast_op(a, b, /*is_mul=*/false); }
  Var mul_bcast(Var a, Var b) { return bcast_op(a, b, /*is_mul=*/true); }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    Tensor out = trackseg::matmul(val(a), val(b));
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x = t.nodes_[ai].val, &y = t.nodes_[bi].val;
      t.accum_same(ai, trackseg::matmul_nt(g, y));
      t.accum_same(bi, trackseg::matmul(trackseg::transpose(x), g));
    });
  }

  // a * b^T; preferred when both operands are row-major feature rows.
  Var matmul_nt(Var a, Var b) {
    Tensor out = trackseg::matmul_nt(val(a), val(b));
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x = t.nodes_[ai].val, &y = t.nodes_[bi].val;
      t.accum_same(ai, trackseg::matmul(g, y));
      t.accum_same(bi, trackseg::matmul(trackseg::transpose(g), x));
    });
  }

  Var transpose(Var a) {
    Tensor out = trackseg::transpose(val(a));
    return push(std::move(out), [ai = a.i](Tape& t) {
      t.accum_same(ai, trackseg::transpose(t.nodes_[t.cursor_].grad));
    });
  }

  // ---- nonlinearity ----

  Var relu(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& x = t.nodes_[ai].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k)
        if (x.data[k] > 0.0) ga.data[k] += g.data[k];
    });
  }

  Var sigmoid(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = trackseg::sigmoid(v);
    Var r = push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& y = t.nodes_[t.cursor_].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k)
        ga.data[k] += g.data[k] * y.data[k] * (1.0 - y.data[k]);
    });
    return r;
  }

  Var softplus(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = trackseg::softplus(v);
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& x = t.nodes_[ai].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k)
        ga.data[k] += g.data[k] * trackseg::sigmoid(x.data[k]);
    });
  }

  Var log(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::log(v);
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& x = t.nodes_[ai].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += g.data[k] / x.data[k];
    });
  }

  Var abs(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::fabs(v);
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& x = t.nodes_[ai].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (x.data[k] > 0.0) ga.data[k] += g.data[k];
        else if (x.data[k] < 0.0) ga.data[k] -= g.data[k];
      }
    });
  }

  // Clamp to [lo, hi]; gradient passes only strictly inside the interval.
  Var clip(Var a, double lo, double hi) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::min(hi, std::max(lo, v));
    return push(std::move(out), [ai = a.i, lo, hi](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& x = t.nodes_[ai].val;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k)
        if (x.data[k] > lo && x.data[k] < hi) ga.data[k] += g.data[k];
    });
  }

  Var softmax_rows(Var a) {
    Tensor out = trackseg::softmax_rows(val(a));
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& y = t.nodes_[t.cursor_].val;
      Tensor& ga = t.gref(ai);
      for (int i = 0; i < y.rows; ++i) {
        const double* yr = y.row_ptr(i);
        const double* gr = g.row_ptr(i);
        double s = 0.0;
        for (int j = 0; j < y.cols; ++j) s += yr[j] * gr[j];
        double* gar = ga.row_ptr(i);
        for (int j = 0; j < y.cols; ++j) gar[j] += yr[j] * (gr[j] - s);
      }
    });
  }

  Var log_softmax_rows(Var a) {
    Tensor out = trackseg::log_softmax_rows(val(a));
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor& ly = t.nodes_[t.cursor_].val;
      Tensor& ga = t.gref(ai);
      for (int i = 0; i < ly.rows; ++i) {
        const double* lr = ly.row_ptr(i);
        const double* gr = g.row_ptr(i);
        double s = 0.0;
        for (int j = 0; j < ly.cols; ++j) s += gr[j];
        double* gar = ga.row_ptr(i);
        for (int j = 0; j < ly.cols; ++j) gar[j] += gr[j] - std::exp(lr[j]) * s;
      }
    });
  }

  // ---- reductions & reshaping ----

  Var sum_all(Var a) {
    double s = 0.0;
    for (double v : val(a).data) s += v;
    return push(Tensor::full(1, 1, s), [ai = a.i](Tape& t) {
      const double g = t.nodes_[t.cursor_].grad.data[0];
      Tensor& ga = t.gref(ai);
      for (double& v : ga.data) v += g;
    });
  }

  Var mean_all(Var a) {
    const double n = static_cast<double>(val(a).size());
    require(n > 0, "mean_all: empty tensor");
    double s = 0.0;
    for (double v : val(a).data) s += v;
    return push(Tensor::full(1, 1, s / n), [ai = a.i, n](Tape& t) {
      const double g = t.nodes_[t.cursor_].grad.data[0] / n;
      Tensor& ga = t.gref(ai);
      for (double& v : ga.data) v += g;
    });
  }

  Var sum_rows(Var a) {
    const Tensor& x = val(a);
    Tensor out(x.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
      double s = 0.0;
      const double* r = x.row_ptr(i);
      for (int j = 0; j < x.cols; ++j) s += r[j];
      out.at(i, 0) = s;
    }
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (int i = 0; i < ga.rows; ++i) {
        const double gi = g.at(i, 0);
        double* r = ga.row_ptr(i);
        for (int j = 0; j < ga.cols; ++j) r[j] += gi;
      }
    });
  }

  Var reshape(Var a, int r, int c) {
    const Tensor& x = val(a);
    require(static_cast<std::size_t>(r) * c == x.size(), "reshape: size mismatch");
    Tensor out(r, c, x.data);
    return push(std::move(out), [ai = a.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += g.data[k];
    });
  }

  Var gather_rows(Var a, std::vector<int> rows) {
    const Tensor& x = val(a);
    Tensor out(static_cast<int>(rows.size()), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(x.row_ptr(rows[i]), x.cols, out.row_ptr(static_cast<int>(i)));
    return push(std::move(out), [ai = a.i, rows = std::move(rows)](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* gr = g.row_ptr(static_cast<int>(i));
        double* gar = ga.row_ptr(rows[i]);
        for (int j = 0; j < g.cols; ++j) gar[j] += gr[j];
      }
    });
  }

  // Selected (row, col) entries as a (k x 1) column.
  Var gather_entries(Var a, std::vector<std::pair<int, int>> idx) {
    const Tensor& x = val(a);
    Tensor out(static_cast<int>(idx.size()), 1);
    for (std::size_t k = 0; k < idx.size(); ++k) out.at(static_cast<int>(k), 0) = x.at(idx[k].first, idx[k].second);
    return push(std::move(out), [ai = a.i, idx = std::move(idx)](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (std::size_t k = 0; k < idx.size(); ++k)
        ga.at(idx[k].first, idx[k].second) += g.at(static_cast<int>(k), 0);
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    const int cols = val(parts[0]).cols;
    int rows = 0;
    for (Var p : parts) {
      require(val(p).cols == cols, "concat_rows: column mismatch");
      rows += val(p).rows;
    }
    Tensor out(rows, cols);
    int r = 0;
    std::vector<int> ids;
    std::vector<int> offs;
    for (Var p : parts) {
      const Tensor& x = val(p);
      std::copy(x.data.begin(), x.data.end(), out.row_ptr(r));
      ids.push_back(p.i);
      offs.push_back(r);
      r += x.rows;
    }
    return push(std::move(out), [ids = std::move(ids), offs = std::move(offs)](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      for (std::size_t p = 0; p < ids.size(); ++p) {
        Tensor& ga = t.gref(ids[p]);
        for (int i = 0; i < ga.rows; ++i) {
          const double* gr = g.row_ptr(offs[p] + i);
          double* gar = ga.row_ptr(i);
          for (int j = 0; j < g.cols; ++j) gar[j] += gr[j];
        }
      }
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Tensor& x = val(a);
    require(0 <= c0 && c0 < c1 && c1 <= x.cols, "slice_cols: bad range");
    Tensor out(x.rows, c1 - c0);
    for (int i = 0; i < x.rows; ++i) std::copy_n(x.row_ptr(i) + c0, c1 - c0, out.row_ptr(i));
    return push(std::move(out), [ai = a.i, c0](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (int i = 0; i < g.rows; ++i) {
        const double* gr = g.row_ptr(i);
        double* gar = ga.row_ptr(i) + c0;
        for (int j = 0; j < g.cols; ++j) gar[j] += gr[j];
      }
    });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.rows == y.rows, "concat_cols: row mismatch");
    Tensor out(x.rows, x.cols + y.cols);
    for (int i = 0; i < x.rows; ++i) {
      std::copy_n(x.row_ptr(i), x.cols, out.row_ptr(i));
      std::copy_n(y.row_ptr(i), y.cols, out.row_ptr(i) + x.cols);
    }
    return push(std::move(out), [ai = a.i, bi = b.i, xc = x.cols](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor &ga = t.gref(ai), &gb = t.gref(bi);
      for (int i = 0; i < g.rows; ++i) {
        const double* gr = g.row_ptr(i);
        double* gar = ga.row_ptr(i);
        for (int j = 0; j < ga.cols; ++j) gar[j] += gr[j];
        double* gbr = gb.row_ptr(i);
        for (int j = 0; j < gb.cols; ++j) gbr[j] += gr[xc + j];
      }
    });
  }

  // Pairwise volume IoU of axis-aligned boxes stored as (min, max) rows:
  // a (N x 6), b (M x 6) -> (N*M x 1), row i*M+j = IoU(a_i, b_j). Disjoint or
  // degenerate pairs score 0 with zero gradient; elsewhere the adjoint follows
  // the piecewise-smooth intersection/union expression, with ties broken
  // toward the first operand.
  Var pairwise_box_iou(Var a, Var b) {
    const Tensor &x = val(a), &y = val(b);
    require(x.cols == 6 && y.cols == 6, "pairwise_box_iou: boxes must be (min,max) rows");
    Tensor out(x.rows * y.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
      const double* ba = x.row_ptr(i);
      for (int j = 0; j < y.rows; ++j) {
        const double* bb = y.row_ptr(j);
        double inter = 1.0;
        for (int ax = 0; ax < 3 && inter > 0.0; ++ax) {
          const double w = std::min(ba[3 + ax], bb[3 + ax]) - std::max(ba[ax], bb[ax]);
          inter = w > 0.0 ? inter * w : 0.0;
        }
        if (inter > 0.0) {
          const double va = (ba[3] - ba[0]) * (ba[4] - ba[1]) * (ba[5] - ba[2]);
          const double vb = (bb[3] - bb[0]) * (bb[4] - bb[1]) * (bb[5] - bb[2]);
          const double uni = va + vb - inter;
          out.at(i * y.rows + j, 0) = uni > 0.0 ? inter / uni : 0.0;
        }
      }
    }
    return push(std::move(out), [ai = a.i, bi = b.i](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x2 = t.nodes_[ai].val, &y2 = t.nodes_[bi].val;
      Tensor &ga = t.gref(ai), &gb = t.gref(bi);
      for (int i = 0; i < x2.rows; ++i) {
        const double* ba = x2.row_ptr(i);
        for (int j = 0; j < y2.rows; ++j) {
          const double go = g.at(i * y2.rows + j, 0);
          if (go == 0.0) continue;
          const double* bb = y2.row_ptr(j);
          double w[3];
          bool pos = true;
          for (int ax = 0; ax < 3; ++ax) {
            w[ax] = std::min(ba[3 + ax], bb[3 + ax]) - std::max(ba[ax], bb[ax]);
            pos = pos && w[ax] > 0.0;
          }
          if (!pos) continue;
          const double inter = w[0] * w[1] * w[2];
          const double ea[3] = {ba[3] - ba[0], ba[4] - ba[1], ba[5] - ba[2]};
          const double eb[3] = {bb[3] - bb[0], bb[4] - bb[1], bb[5] - bb[2]};
          const double va = ea[0] * ea[1] * ea[2];
          const double vb = eb[0] * eb[1] * eb[2];
          const double uni = va + vb - inter;
          if (uni <= 0.0) continue;
          const double ci = (uni + inter) / (uni * uni);  // d(I/U)/dI with U = Va+Vb-I
          const double cv = -inter / (uni * uni);         // d(I/U)/dVa = d(I/U)/dVb
          double* gar = ga.row_ptr(i);
          double* gbr = gb.row_ptr(j);
          for (int ax = 0; ax < 3; ++ax) {
            const double dI = inter / w[ax];  // product of the other two widths
            // intersection width endpoints
            if (ba[ax] >= bb[ax]) gar[ax] += go * ci * dI * -1.0;
            else gbr[ax] += go * ci * dI * -1.0;
            if (ba[3 + ax] <= bb[3 + ax]) gar[3 + ax] += go * ci * dI;
            else gbr[3 + ax] += go * ci * dI;
            // own volumes
            const double dVa = va / ea[ax];
            const double dVb = vb / eb[ax];
            gar[ax] += go * cv * -dVa;
            gar[3 + ax] += go * cv * dVa;
            gbr[ax] += go * cv * -dVb;
            gbr[3 + ax] += go * cv * dVb;
          }
        }
      }
    });
  }

  // Mean of the feature rows selected by each index set: (num sets x cols).
  // The sparse counterpart of pooling with a constant averaging matrix.
  Var mean_rows_subset(Var a, std::vector<std::vector<int>> sets) {
    const Tensor& x = val(a);
    Tensor out(static_cast<int>(sets.size()), x.cols);
    for (std::size_t s = 0; s < sets.size(); ++s) {
      require(!sets[s].empty(), "empty mask");
      double* o = out.row_ptr(static_cast<int>(s));
      for (int idx : sets[s]) {
        const double* r = x.row_ptr(idx);
        for (int j = 0; j < x.cols; ++j) o[j] += r[j];
      }
      const double inv = 1.0 / static_cast<double>(sets[s].size());
      for (int j = 0; j < x.cols; ++j) o[j] *= inv;
    }
    return push(std::move(out), [ai = a.i, sets = std::move(sets)](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      Tensor& ga = t.gref(ai);
      for (std::size_t s = 0; s < sets.size(); ++s) {
        const double inv = 1.0 / static_cast<double>(sets[s].size());
        const double* gr = g.row_ptr(static_cast<int>(s));
        for (int idx : sets[s]) {
          double* gar = ga.row_ptr(idx);
          for (int j = 0; j < g.cols; ++j) gar[j] += gr[j] * inv;
        }
      }
    });
  }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;
  bool rec_;
  int cursor_ = -1;  // node whose adjoint is being run

  static void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
  }

  Var push(Tensor v, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(v);
    if (rec_) n.back = wrap(std::move(back));
    nodes_.push_back(std::move(n));
    return Var{size() - 1};
  }

  std::function<void(Tape&)> wrap(std::function<void(Tape&)> f) {
    const int id = size();
    return [id, f = std::move(f)](Tape& t) {
      t.cursor_ = id;
      f(t);
    };
  }

  Tensor& gref(int i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) n.grad = Tensor(n.val.rows, n.val.cols);
    return n.grad;
  }

  void accum_same(int i, const Tensor& g) {
    Tensor& ga = gref(i);
    for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += g.data[k];
  }

  Var bcast_op(Var a, Var b, bool is_mul) {
    const Tensor &x = val(a), &y = val(b);
    const bool row_b = (y.rows == 1 && y.cols == x.cols);
    const bool col_b = (y.cols == 1 && y.rows == x.rows);
    const bool scl_b = (y.rows == 1 && y.cols == 1);
    require(row_b || col_b || scl_b, "broadcast: incompatible shapes");
    Tensor out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      const double* xr = x.row_ptr(i);
      double* o = out.row_ptr(i);
      for (int j = 0; j < x.cols; ++j) {
        const double bv = scl_b ? y.data[0] : (row_b ? y.data[j] : y.at(i, 0));
        o[j] = is_mul ? xr[j] * bv : xr[j] + bv;
      }
    }
    return push(std::move(out), [ai = a.i, bi = b.i, is_mul, row_b, col_b, scl_b](Tape& t) {
      const Tensor& g = t.nodes_[t.cursor_].grad;
      const Tensor &x2 = t.nodes_[ai].val, &y2 = t.nodes_[bi].val;
      Tensor &ga = t.gref(ai), &gb = t.gref(bi);
      for (int i = 0; i < g.rows; ++i) {
        const double* gr = g.row_ptr(i);
        const double* xr = x2.row_ptr(i);
        double* gar = ga.row_ptr(i);
        for (int j = 0; j < g.cols; ++j) {
          const double bv = scl_b ? y2.data[0] : (row_b ? y2.data[j] : y2.at(i, 0));
          if (is_mul) {
            gar[j] += gr[j] * bv;
            const double gbv = gr[j] * xr[j];
            if (scl_b) gb.data[0] += gbv;
            else if (row_b) gb.data[j] += gbv;
            else gb.at(i, 0) += gbv;
          } else {
            gar[j] += gr[j];
            if (scl_b) gb.data[0] += gr[j];
            else if (row_b) gb.data[j] += gr[j];
            else gb.at(i, 0) += gr[j];
          }
        }
      }
    });
  }
};

}  // namespace trackseg
