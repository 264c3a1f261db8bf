#include "masker/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <utility>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "masker/errors.hpp"
#include "masker/kernels.hpp"
#include "masker/rng.hpp"

namespace masker::model {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kCheckpointMagic[8] = {'M', 'S', 'K', 'R', 'C', 'K', 'P', '1'};

double gelu(double x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::vector<double> stable_softmax(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double sum = 0.0;
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - m);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

double log_sum_exp(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    return m + std::log(sum);
}

int effective_threads() {
#ifdef _OPENMP
    const int n = kernels::threads();
    return n > 0 ? n : omp_get_max_threads();
#else
    return 1;
#endif
}

// Runs fn(i) for i in [0, count). Safe for any fn whose iterations are
// independent; per-iteration arithmetic is unaffected by the thread count.
template <typename Fn>
void for_docs(std::size_t count, Fn&& fn) {
#ifdef _OPENMP
    if (kernels::parallel_enabled() && count > 1) {
        const int nt = effective_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
        for (long long i = 0; i < static_cast<long long>(count); ++i) {
            fn(static_cast<std::size_t>(i));
        }
        return;
    }
#endif
    for (std::size_t i = 0; i < count; ++i) fn(i);
}

struct LayerTape {
    Matrix x_in;                // n x d input to the attention sublayer
    Matrix q, k, v;             // n x d
    std::vector<Matrix> probs;  // per head, n x n attention rows
    Matrix ctx;                 // n x d concatenated head outputs
    Matrix attn_mask;           // dropout scales, empty when inactive
    Matrix r1;                  // residual before the first layer norm
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix x_mid;  // n x d input to the feed-forward sublayer
    Matrix h_pre;  // n x hidden before GELU
    Matrix h_act;  // n x hidden after GELU
    Matrix ff_mask;
    Matrix r2;
    std::vector<double> ln2_mean, ln2_rstd;
    Matrix x_out;
};

struct Tape {
    std::vector<int> ids;
    Matrix emb_mask;
    Matrix x0;  // (T+1) x d embedded input after dropout
    std::vector<LayerTape> layers;
    const Matrix* x_final = nullptr;
};

void fill_dropout_mask(Matrix& mask, std::size_t rows, std::size_t cols, double rate, Rng& rng) {
    mask = Matrix(rows, cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
    }
}

void apply_mask(Matrix& x, const Matrix& mask) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

void add_bias_rows(Matrix& x, const Matrix& bias) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double* row = x.row(i);
        const double* b = bias.row(0);
        for (std::size_t j = 0; j < x.cols(); ++j) row[j] += b[j];
    }
}

void layer_norm_forward(const Matrix& in, const Matrix& gain, const Matrix& bias, Matrix& out,
                        std::vector<double>& means, std::vector<double>& rstds) {
    const std::size_t n = in.rows(), d = in.cols();
    out = Matrix(n, d);
    means.resize(n);
    rstds.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = in.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        means[i] = mean;
        rstds[i] = rstd;
        double* y = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = gain.row(0)[j] * (x[j] - mean) * rstd + bias.row(0)[j];
        }
    }
}

// dIn from dOut; accumulates gain/bias gradients.
void layer_norm_backward(const Matrix& in, const Matrix& gain, const std::vector<double>& means,
                         const std::vector<double>& rstds, const Matrix& dout, Matrix& din,
                         Matrix& dgain, Matrix& dbias) {
    const std::size_t n = in.rows(), d = in.cols();
    din = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = in.row(i);
        const double* dy = dout.row(i);
        const double mean = means[i], rstd = rstds[i];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x[j] - mean) * rstd;
            const double dxhat = dy[j] * gain.row(0)[j];
            dgain.row(0)[j] += dy[j] * xhat;
            dbias.row(0)[j] += dy[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        double* dx = din.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x[j] - mean) * rstd;
            const double dxhat = dy[j] * gain.row(0)[j];
            dx[j] = rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

Matrix head_slice(const Matrix& x, int head, int head_dim) {
    Matrix s(x.rows(), static_cast<std::size_t>(head_dim));
    const std::size_t off = static_cast<std::size_t>(head) * static_cast<std::size_t>(head_dim);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* src = x.row(i) + off;
        std::copy(src, src + head_dim, s.row(i));
    }
    return s;
}

void head_scatter_add(Matrix& x, const Matrix& s, int head, int head_dim) {
    const std::size_t off = static_cast<std::size_t>(head) * static_cast<std::size_t>(head_dim);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double* dst = x.row(i) + off;
        const double* src = s.row(i);
        for (int j = 0; j < head_dim; ++j) dst[j] += src[j];
    }
}

void column_sums_add(const Matrix& x, Matrix& acc) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* row = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) acc.row(0)[j] += row[j];
    }
}

void forward_tape(const EncoderModel& model, const std::vector<int>& ids, bool train_mode,
                  std::uint64_t dropout_seed, Tape& tape) {
    const ModelConfig& cfg = model.config;
    const Parameters& p = model.params;
    const std::size_t t_len = ids.size();
    if (t_len > static_cast<std::size_t>(cfg.max_length)) {
        throw DataError("document length " + std::to_string(t_len) + " exceeds max_length " +
                        std::to_string(cfg.max_length));
    }
    const std::size_t n = t_len + 1;
    const std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
    const bool use_dropout = train_mode && cfg.dropout > 0.0;
    Rng rng(dropout_seed);

    tape.ids = ids;
    tape.x0 = Matrix(n, d);
    for (std::size_t j = 0; j < d; ++j) {
        tape.x0.at(0, j) = p.summary_embedding.at(0, j) + p.position_embedding.at(0, j);
    }
    for (std::size_t i = 1; i < n; ++i) {
        const int id = ids[i - 1];
        if (id < 0 || id >= cfg.vocab_size) {
            throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
        }
        for (std::size_t j = 0; j < d; ++j) {
            tape.x0.at(i, j) = p.token_embedding.at(static_cast<std::size_t>(id), j) +
                               p.position_embedding.at(i, j);
        }
    }
    if (use_dropout) {
        fill_dropout_mask(tape.emb_mask, n, d, cfg.dropout, rng);
        apply_mask(tape.x0, tape.emb_mask);
    }

    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    tape.layers.assign(static_cast<std::size_t>(cfg.num_layers), LayerTape{});
    const Matrix* x = &tape.x0;
    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerTape& lt = tape.layers[static_cast<std::size_t>(l)];
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        lt.x_in = *x;

        kernels::matmul(lt.x_in, lp.wq, lt.q);
        add_bias_rows(lt.q, lp.bq);
        kernels::matmul(lt.x_in, lp.wk, lt.k);
        add_bias_rows(lt.k, lp.bk);
        kernels::matmul(lt.x_in, lp.wv, lt.v);
        add_bias_rows(lt.v, lp.bv);

        lt.probs.resize(static_cast<std::size_t>(heads));
        lt.ctx = Matrix(n, d);
        for (int h = 0; h < heads; ++h) {
            const Matrix qh = head_slice(lt.q, h, hd);
            const Matrix kh = head_slice(lt.k, h, hd);
            const Matrix vh = head_slice(lt.v, h, hd);
            Matrix& ph = lt.probs[static_cast<std::size_t>(h)];
            kernels::matmul_nt(qh, kh, ph);
            for (std::size_t i = 0; i < ph.size(); ++i) ph[i] *= scale;
            kernels::softmax_rows(ph);
            Matrix ctx_h;
            kernels::matmul(ph, vh, ctx_h);
            head_scatter_add(lt.ctx, ctx_h, h, hd);
        }

        Matrix attn_out;
        kernels::matmul(lt.ctx, lp.wo, attn_out);
        add_bias_rows(attn_out, lp.bo);
        if (use_dropout) {
            fill_dropout_mask(lt.attn_mask, n, d, cfg.dropout, rng);
            apply_mask(attn_out, lt.attn_mask);
        }
        lt.r1 = lt.x_in;
        lt.r1.axpy(1.0, attn_out);
        layer_norm_forward(lt.r1, lp.ln1_gain, lp.ln1_bias, lt.x_mid, lt.ln1_mean, lt.ln1_rstd);

        kernels::matmul(lt.x_mid, lp.ff_w1, lt.h_pre);
        add_bias_rows(lt.h_pre, lp.ff_b1);
        lt.h_act = Matrix(lt.h_pre.rows(), lt.h_pre.cols());
        for (std::size_t i = 0; i < lt.h_pre.size(); ++i) lt.h_act[i] = gelu(lt.h_pre[i]);
        Matrix ff_out;
        kernels::matmul(lt.h_act, lp.ff_w2, ff_out);
        add_bias_rows(ff_out, lp.ff_b2);
        if (use_dropout) {
            fill_dropout_mask(lt.ff_mask, n, d, cfg.dropout, rng);
            apply_mask(ff_out, lt.ff_mask);
        }
        lt.r2 = lt.x_mid;
        lt.r2.axpy(1.0, ff_out);
        layer_norm_forward(lt.r2, lp.ln2_gain, lp.ln2_bias, lt.x_out, lt.ln2_mean, lt.ln2_rstd);
        x = &lt.x_out;
    }
    tape.x_final = x;
}

std::vector<double> doc_logits_from(const EncoderModel& model, const Matrix& x_final) {
    const std::size_t d = x_final.cols();
    const std::size_t c = model.params.doc_w.cols();
    std::vector<double> z(c);
    for (std::size_t k = 0; k < c; ++k) {
        double acc = model.params.doc_b.at(0, k);
        for (std::size_t j = 0; j < d; ++j) acc += x_final.at(0, j) * model.params.doc_w.at(j, k);
        z[k] = acc;
    }
    return z;
}

Matrix token_rows(const Matrix& x_final) {
    const std::size_t t_len = x_final.rows() - 1;
    Matrix xt(t_len, x_final.cols());
    for (std::size_t i = 0; i < t_len; ++i) {
        const double* src = x_final.row(i + 1);
        std::copy(src, src + x_final.cols(), xt.row(i));
    }
    return xt;
}

Matrix token_logits_from(const EncoderModel& model, const Matrix& x_final) {
    const Matrix xt = token_rows(x_final);
    Matrix logits;
    kernels::matmul(xt, model.params.tok_w, logits);
    add_bias_rows(logits, model.params.tok_b);
    return logits;
}

AttentionTrace trace_from_tape(const Tape& tape) {
    AttentionTrace trace;
    const std::size_t t_len = tape.ids.size();
    trace.weights.assign(t_len, 0.0);
    if (t_len == 0 || tape.layers.empty()) return trace;
    const LayerTape& last = tape.layers.back();
    const double inv_heads = 1.0 / static_cast<double>(last.probs.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < t_len; ++i) {
        double w = 0.0;
        for (const Matrix& ph : last.probs) w += ph.at(0, i + 1);
        w *= inv_heads;
        trace.weights[i] = w;
        sum += w;
    }
    if (sum > 0.0) {
        for (double& w : trace.weights) w /= sum;
    } else {
        for (double& w : trace.weights) w = 1.0 / static_cast<double>(t_len);
    }
    return trace;
}

// Backpropagates head pulls through the encoder into `grads`. `ddoc` may be
// empty (no document-head pull); `dtok` may be empty (no token-head pull).
void backward_tape(const EncoderModel& model, const Tape& tape, const std::vector<double>& ddoc,
                   const Matrix& dtok, Parameters& grads) {
    const ModelConfig& cfg = model.config;
    const Parameters& p = model.params;
    const Matrix& x_final = *tape.x_final;
    const std::size_t n = x_final.rows();
    const std::size_t d = x_final.cols();

    Matrix dx(n, d);
    if (!ddoc.empty()) {
        for (std::size_t k = 0; k < ddoc.size(); ++k) {
            grads.doc_b.at(0, k) += ddoc[k];
            for (std::size_t j = 0; j < d; ++j) {
                grads.doc_w.at(j, k) += x_final.at(0, j) * ddoc[k];
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < ddoc.size(); ++k) acc += p.doc_w.at(j, k) * ddoc[k];
            dx.at(0, j) += acc;
        }
    }
    if (dtok.size() > 0) {
        const Matrix xt = token_rows(x_final);
        column_sums_add(dtok, grads.tok_b);
        kernels::matmul_tn_acc(xt, dtok, grads.tok_w);
        Matrix dxt;
        kernels::matmul_nt(dtok, p.tok_w, dxt);
        for (std::size_t i = 0; i < dxt.rows(); ++i) {
            double* dst = dx.row(i + 1);
            const double* src = dxt.row(i);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    }

    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerTape& lt = tape.layers[static_cast<std::size_t>(l)];
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        LayerParams& lg = grads.layers[static_cast<std::size_t>(l)];

        Matrix dr2;
        layer_norm_backward(lt.r2, lp.ln2_gain, lt.ln2_mean, lt.ln2_rstd, dx, dr2, lg.ln2_gain,
                            lg.ln2_bias);
        Matrix dff = dr2;
        if (lt.ff_mask.size() > 0) apply_mask(dff, lt.ff_mask);
        column_sums_add(dff, lg.ff_b2);
        kernels::matmul_tn_acc(lt.h_act, dff, lg.ff_w2);
        Matrix dh_act;
        kernels::matmul_nt(dff, lp.ff_w2, dh_act);
        for (std::size_t i = 0; i < dh_act.size(); ++i) dh_act[i] *= gelu_grad(lt.h_pre[i]);
        column_sums_add(dh_act, lg.ff_b1);
        kernels::matmul_tn_acc(lt.x_mid, dh_act, lg.ff_w1);
        Matrix dx_mid;
        kernels::matmul_nt(dh_act, lp.ff_w1, dx_mid);
        dx_mid.axpy(1.0, dr2);  // residual branch

        Matrix dr1;
        layer_norm_backward(lt.r1, lp.ln1_gain, lt.ln1_mean, lt.ln1_rstd, dx_mid, dr1, lg.ln1_gain,
                            lg.ln1_bias);
        Matrix dattn = dr1;
        if (lt.attn_mask.size() > 0) apply_mask(dattn, lt.attn_mask);
        column_sums_add(dattn, lg.bo);
        kernels::matmul_tn_acc(lt.ctx, dattn, lg.wo);
        Matrix dctx;
        kernels::matmul_nt(dattn, lp.wo, dctx);

        Matrix dq(n, d), dk(n, d), dv(n, d);
        for (int h = 0; h < heads; ++h) {
            const Matrix& ph = lt.probs[static_cast<std::size_t>(h)];
            const Matrix qh = head_slice(lt.q, h, hd);
            const Matrix kh = head_slice(lt.k, h, hd);
            const Matrix vh = head_slice(lt.v, h, hd);
            const Matrix dctx_h = head_slice(dctx, h, hd);

            Matrix dp;
            kernels::matmul_nt(dctx_h, vh, dp);
            Matrix dvh(n, static_cast<std::size_t>(hd));
            kernels::matmul_tn_acc(ph, dctx_h, dvh);

            Matrix ds(n, n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* prow = ph.row(i);
                const double* dprow = dp.row(i);
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += prow[j] * dprow[j];
                double* dsrow = ds.row(i);
                for (std::size_t j = 0; j < n; ++j) {
                    dsrow[j] = prow[j] * (dprow[j] - dot) * scale;
                }
            }
            Matrix dqh;
            kernels::matmul(ds, kh, dqh);
            Matrix dkh(n, static_cast<std::size_t>(hd));
            kernels::matmul_tn_acc(ds, qh, dkh);

            head_scatter_add(dq, dqh, h, hd);
            head_scatter_add(dk, dkh, h, hd);
            head_scatter_add(dv, dvh, h, hd);
        }

        Matrix dx_in = dr1;  // residual branch
        column_sums_add(dq, lg.bq);
        kernels::matmul_tn_acc(lt.x_in, dq, lg.wq);
        Matrix tmp;
        kernels::matmul_nt(dq, lp.wq, tmp);
        dx_in.axpy(1.0, tmp);
        column_sums_add(dk, lg.bk);
        kernels::matmul_tn_acc(lt.x_in, dk, lg.wk);
        kernels::matmul_nt(dk, lp.wk, tmp);
        dx_in.axpy(1.0, tmp);
        column_sums_add(dv, lg.bv);
        kernels::matmul_tn_acc(lt.x_in, dv, lg.wv);
        kernels::matmul_nt(dv, lp.wv, tmp);
        dx_in.axpy(1.0, tmp);

        dx = std::move(dx_in);
    }

    if (tape.emb_mask.size() > 0) apply_mask(dx, tape.emb_mask);
    for (std::size_t j = 0; j < d; ++j) {
        grads.summary_embedding.at(0, j) += dx.at(0, j);
        grads.position_embedding.at(0, j) += dx.at(0, j);
    }
    for (std::size_t i = 1; i < n; ++i) {
        const auto id = static_cast<std::size_t>(tape.ids[i - 1]);
        for (std::size_t j = 0; j < d; ++j) {
            grads.token_embedding.at(id, j) += dx.at(i, j);
            grads.position_embedding.at(i, j) += dx.at(i, j);
        }
    }
}

// Head-level losses; dz (when non-null) receives the unweighted pull.
double ce_from_logits(HeadMode mode, const std::vector<double>& z, int label,
                      std::vector<double>* dz) {
    const std::size_t c = z.size();
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
        throw DataError("label " + std::to_string(label) + " outside " + std::to_string(c) +
                        " classes");
    }
    if (mode == HeadMode::softmax_multiclass) {
        const double lse = log_sum_exp(z);
        if (dz) {
            *dz = stable_softmax(z);
            (*dz)[static_cast<std::size_t>(label)] -= 1.0;
        }
        return lse - z[static_cast<std::size_t>(label)];
    }
    double loss = 0.0;
    if (dz) dz->assign(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        const double t = (static_cast<std::size_t>(label) == k) ? 1.0 : 0.0;
        loss += std::max(z[k], 0.0) - z[k] * t + std::log1p(std::exp(-std::abs(z[k])));
        if (dz) (*dz)[k] = sigmoid(z[k]) - t;
    }
    return loss;
}

double mer_from_logits(HeadMode mode, const std::vector<double>& z, std::vector<double>* dz) {
    const std::size_t c = z.size();
    const double inv_c = 1.0 / static_cast<double>(c);
    if (mode == HeadMode::softmax_multiclass) {
        const double lse = log_sum_exp(z);
        double mean_logit = 0.0;
        for (double v : z) mean_logit += v;
        mean_logit *= inv_c;
        if (dz) {
            *dz = stable_softmax(z);
            for (double& v : *dz) v -= inv_c;
        }
        // KL(uniform || p) = -ln C + lse - mean(z)
        return -std::log(static_cast<double>(c)) + lse - mean_logit;
    }
    double loss = 0.0;
    if (dz) dz->assign(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        loss += -std::log(2.0) + 0.5 * (softplus(z[k]) + softplus(-z[k]));
        if (dz) (*dz)[k] = (sigmoid(z[k]) - 0.5) * inv_c;
    }
    return loss * inv_c;
}

double mkr_from_logits(const Matrix& tok_logits, const MaskedInput& view, Matrix* dtok) {
    if (dtok) *dtok = Matrix(tok_logits.rows(), tok_logits.cols());
    double loss = 0.0;
    for (std::size_t m = 0; m < view.positions.size(); ++m) {
        const std::size_t pos = view.positions[m];
        if (pos >= tok_logits.rows()) {
            throw DataError("masked position " + std::to_string(pos) +
                            " outside document of length " + std::to_string(tok_logits.rows()));
        }
        const int target = view.targets.at(m);
        if (target < 0 || static_cast<std::size_t>(target) >= tok_logits.cols()) {
            throw DataError("reconstruction target " + std::to_string(target) +
                            " outside vocabulary");
        }
        std::vector<double> row(tok_logits.row(pos), tok_logits.row(pos) + tok_logits.cols());
        const double lse = log_sum_exp(row);
        loss += lse - row[static_cast<std::size_t>(target)];
        if (dtok) {
            const std::vector<double> probs = stable_softmax(row);
            double* drow = dtok->row(pos);
            for (std::size_t j = 0; j < probs.size(); ++j) drow[j] = probs[j];
            drow[static_cast<std::size_t>(target)] -= 1.0;
        }
    }
    return loss;
}

void validate_view(const corpus::Document& doc, const MaskedInput& view, bool needs_targets) {
    if (view.token_ids.size() != doc.token_ids.size()) {
        throw DataError("masked view length differs from the document length");
    }
    if (needs_targets && view.targets.size() != view.positions.size()) {
        throw DataError("masked view has " + std::to_string(view.positions.size()) +
                        " positions but " + std::to_string(view.targets.size()) + " targets");
    }
}

// Clean view: document cross-entropy. Returns the loss; pulls grads when
// grads != nullptr with the given output weight.
double process_clean(const EncoderModel& model, const corpus::Document& doc, double weight,
                     bool train_mode, std::uint64_t seed, Parameters* grads) {
    Tape tape;
    forward_tape(model, doc.token_ids, train_mode, seed, tape);
    std::vector<double> z = doc_logits_from(model, *tape.x_final);
    std::vector<double> dz;
    const double loss = ce_from_logits(model.config.head_mode, z, doc.label, grads ? &dz : nullptr);
    if (grads) {
        for (double& v : dz) v *= weight;
        backward_tape(model, tape, dz, Matrix(), *grads);
    }
    return loss;
}

double process_keyword_view(const EncoderModel& model, const MaskedInput& view, double weight,
                            bool train_mode, std::uint64_t seed, Parameters* grads) {
    Tape tape;
    forward_tape(model, view.token_ids, train_mode, seed, tape);
    const Matrix tok_logits = token_logits_from(model, *tape.x_final);
    Matrix dtok;
    const double loss = mkr_from_logits(tok_logits, view, grads ? &dtok : nullptr);
    if (grads) {
        for (std::size_t i = 0; i < dtok.size(); ++i) dtok[i] *= weight;
        backward_tape(model, tape, {}, dtok, *grads);
    }
    return loss;
}

double process_context_view(const EncoderModel& model, const MaskedInput& view, double weight,
                            bool train_mode, std::uint64_t seed, Parameters* grads) {
    Tape tape;
    forward_tape(model, view.token_ids, train_mode, seed, tape);
    std::vector<double> z = doc_logits_from(model, *tape.x_final);
    std::vector<double> dz;
    const double loss = mer_from_logits(model.config.head_mode, z, grads ? &dz : nullptr);
    if (grads) {
        for (double& v : dz) v *= weight;
        backward_tape(model, tape, dz, Matrix(), *grads);
    }
    return loss;
}

struct DocResult {
    double ce = 0.0;
    double mkr = 0.0;
    double mer = 0.0;
};

// Shared batch walk for batch_loss / batch_gradients. Per-document work is
// independent; gradient buffers are reduced serially in document order so the
// result is identical for every thread count.
LossBreakdown batch_pass(const EncoderModel& model, const std::vector<BatchEntry>& batch,
                         const LossSpec& spec, Parameters* grads, bool train_mode,
                         std::uint64_t step_seed) {
    const std::size_t b = batch.size();
    if (b == 0) throw DataError("empty batch");
    const double inv_b = 1.0 / static_cast<double>(b);

    std::vector<DocResult> results(b);
    std::vector<Parameters> buffers;
    if (grads) buffers.assign(b, Parameters{});

    for_docs(b, [&](std::size_t i) {
        const BatchEntry& entry = batch[i];
        if (entry.clean == nullptr) throw DataError("batch entry without a document");
        Parameters local;
        Parameters* g = nullptr;
        if (grads) {
            local = Parameters::zeros_like(model.config);
            g = &local;
        }
        DocResult& r = results[i];
        if (spec.ce_weight != 0.0) {
            const std::uint64_t seed = mix_seed({step_seed, i, 0});
            r.ce = process_clean(model, *entry.clean, spec.ce_weight * inv_b, train_mode, seed, g);
        }
        if (spec.mkr_weight != 0.0 && entry.keyword_view && !entry.skip_reconstruction) {
            validate_view(*entry.clean, *entry.keyword_view, true);
            const std::uint64_t seed = mix_seed({step_seed, i, 1});
            r.mkr = process_keyword_view(model, *entry.keyword_view, spec.mkr_weight * inv_b,
                                         train_mode, seed, g);
        }
        if (spec.mer_weight != 0.0 && entry.context_view) {
            validate_view(*entry.clean, *entry.context_view, false);
            const std::uint64_t seed = mix_seed({step_seed, i, 2});
            r.mer = process_context_view(model, *entry.context_view, spec.mer_weight * inv_b,
                                         train_mode, seed, g);
        }
        if (grads) buffers[i] = std::move(local);
    });

    if (grads) {
        *grads = Parameters::zeros_like(model.config);
        for (std::size_t i = 0; i < b; ++i) grads->add_scaled(buffers[i], 1.0);
    }

    LossBreakdown out;
    for (const DocResult& r : results) {
        out.ce += r.ce;
        out.mkr += r.mkr;
        out.mer += r.mer;
    }
    out.ce *= inv_b;
    out.mkr *= inv_b;
    out.mer *= inv_b;
    out.total = spec.ce_weight * out.ce + spec.mkr_weight * out.mkr + spec.mer_weight * out.mer;
    return out;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"vocab_size", cfg.vocab_size},
                          {"num_classes", cfg.num_classes},
                          {"embed_dim", cfg.embed_dim},
                          {"num_layers", cfg.num_layers},
                          {"num_heads", cfg.num_heads},
                          {"hidden_dim", cfg.hidden_dim},
                          {"max_length", cfg.max_length},
                          {"head_mode", head_mode_name(cfg.head_mode)},
                          {"dropout", cfg.dropout},
                          {"init_seed", cfg.init_seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.max_length = j.at("max_length").get<int>();
    cfg.head_mode = head_mode_from_name(j.at("head_mode").get<std::string>());
    cfg.dropout = j.at("dropout").get<double>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    return cfg;
}

}  // namespace

const char* head_mode_name(HeadMode mode) {
    return mode == HeadMode::softmax_multiclass ? "softmax" : "one_vs_rest";
}

HeadMode head_mode_from_name(const std::string& name) {
    if (name == "softmax") return HeadMode::softmax_multiclass;
    if (name == "one_vs_rest") return HeadMode::one_vs_rest;
    throw ConfigError("unknown head mode '" + name + "' (expected softmax or one_vs_rest)");
}

void ModelConfig::validate() const {
    if (vocab_size <= corpus::kNumReserved) {
        throw ConfigError("vocab_size must exceed the " +
                          std::to_string(corpus::kNumReserved) + " reserved ids");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (embed_dim <= 0 || num_layers <= 0 || num_heads <= 0 || hidden_dim <= 0 || max_length <= 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (embed_dim % num_heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                          " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

Parameters Parameters::zeros_like(const ModelConfig& config) {
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto d = static_cast<std::size_t>(config.embed_dim);
    const auto h = static_cast<std::size_t>(config.hidden_dim);
    const auto c = static_cast<std::size_t>(config.num_classes);
    Parameters p;
    p.token_embedding = Matrix(v, d);
    p.position_embedding = Matrix(static_cast<std::size_t>(config.max_length) + 1, d);
    p.summary_embedding = Matrix(1, d);
    p.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (LayerParams& lp : p.layers) {
        lp.wq = Matrix(d, d); lp.bq = Matrix(1, d);
        lp.wk = Matrix(d, d); lp.bk = Matrix(1, d);
        lp.wv = Matrix(d, d); lp.bv = Matrix(1, d);
        lp.wo = Matrix(d, d); lp.bo = Matrix(1, d);
        lp.ln1_gain = Matrix(1, d); lp.ln1_bias = Matrix(1, d);
        lp.ff_w1 = Matrix(d, h); lp.ff_b1 = Matrix(1, h);
        lp.ff_w2 = Matrix(h, d); lp.ff_b2 = Matrix(1, d);
        lp.ln2_gain = Matrix(1, d); lp.ln2_bias = Matrix(1, d);
    }
    p.doc_w = Matrix(d, c);
    p.doc_b = Matrix(1, c);
    p.tok_w = Matrix(d, v);
    p.tok_b = Matrix(1, v);
    return p;
}

std::size_t Parameters::count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

void Parameters::zero() {
    for_each([](const std::string&, Matrix& m) { m.zero(); });
}

void Parameters::add_scaled(const Parameters& other, double alpha) {
    std::vector<const Matrix*> src;
    other.for_each([&](const std::string&, const Matrix& m) { src.push_back(&m); });
    std::size_t i = 0;
    for_each([&](const std::string&, Matrix& m) { m.axpy(alpha, *src[i++]); });
}

namespace {

enum class TensorKind { weight, bias, gain };

TensorKind classify_tensor(const std::string& name) {
    const std::size_t dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    if (leaf.size() >= 5 && leaf.compare(leaf.size() - 5, 5, "_gain") == 0) {
        return TensorKind::gain;
    }
    if (leaf == "bq" || leaf == "bk" || leaf == "bv" || leaf == "bo" || leaf == "doc_b" ||
        leaf == "tok_b" || leaf.rfind("ff_b", 0) == 0 ||
        (leaf.size() >= 5 && leaf.compare(leaf.size() - 5, 5, "_bias") == 0)) {
        return TensorKind::bias;
    }
    return TensorKind::weight;
}

bool is_embedding_tensor(const std::string& name) {
    return name == "token_embedding" || name == "position_embedding" ||
           name == "summary_embedding";
}

}  // namespace

EncoderModel init_model(const ModelConfig& config) {
    config.validate();
    EncoderModel model;
    model.config = config;
    model.params = Parameters::zeros_like(config);
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
    Rng rng(config.init_seed);
    model.params.for_each([&](const std::string& name, Matrix& m) {
        switch (classify_tensor(name)) {
            case TensorKind::gain:
                for (std::size_t i = 0; i < m.size(); ++i) m[i] = 1.0;
                break;
            case TensorKind::bias:
                break;  // zeros
            case TensorKind::weight:
                for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform_in(-bound, bound);
                break;
        }
    });
    return model;
}

ForwardResult forward(const EncoderModel& model, const corpus::Document& doc, bool train_mode,
                      std::uint64_t dropout_seed) {
    Tape tape;
    forward_tape(model, doc.token_ids, train_mode, dropout_seed, tape);
    ForwardResult result;
    result.head_mode = model.config.head_mode;
    const Matrix& x_final = *tape.x_final;
    result.doc_embedding.assign(x_final.row(0), x_final.row(0) + x_final.cols());
    result.token_embeddings = token_rows(x_final);
    result.doc_logits = doc_logits_from(model, x_final);
    result.token_logits = token_logits_from(model, x_final);
    result.attention = trace_from_tape(tape);
    return result;
}

std::vector<double> class_probabilities(const ForwardResult& result) {
    if (result.head_mode == HeadMode::softmax_multiclass) {
        return stable_softmax(result.doc_logits);
    }
    std::vector<double> p(result.doc_logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(result.doc_logits[i]);
    return p;
}

double cross_entropy_doc(const ForwardResult& result, int label) {
    return ce_from_logits(result.head_mode, result.doc_logits, label, nullptr);
}

double confidence(const ForwardResult& result) {
    const std::vector<double> p = class_probabilities(result);
    double best = 0.0;
    for (double v : p) best = std::max(best, v);
    return best;
}

int predicted_label(const ForwardResult& result) {
    const std::vector<double> p = class_probabilities(result);
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i) {
        if (p[i] > p[best]) best = i;
    }
    return static_cast<int>(best);
}

AttentionTrace attention_trace(const EncoderModel& model, const corpus::Document& doc) {
    Tape tape;
    forward_tape(model, doc.token_ids, false, 0, tape);
    return trace_from_tape(tape);
}

std::vector<AttentionTrace> collect_traces(const EncoderModel& model,
                                           const corpus::LabeledCorpus& corpus) {
    std::vector<AttentionTrace> traces(corpus.documents.size());
    for_docs(corpus.documents.size(), [&](std::size_t i) {
        traces[i] = attention_trace(model, corpus.documents[i]);
    });
    return traces;
}

double reconstruction_loss(const EncoderModel& model, const MaskedInput& view) {
    if (view.targets.size() != view.positions.size()) {
        throw DataError("masked view has " + std::to_string(view.positions.size()) +
                        " positions but " + std::to_string(view.targets.size()) + " targets");
    }
    Tape tape;
    forward_tape(model, view.token_ids, false, 0, tape);
    const Matrix tok_logits = token_logits_from(model, *tape.x_final);
    return mkr_from_logits(tok_logits, view, nullptr);
}

double uniformity_loss(const EncoderModel& model, const MaskedInput& view) {
    Tape tape;
    forward_tape(model, view.token_ids, false, 0, tape);
    const std::vector<double> z = doc_logits_from(model, *tape.x_final);
    return mer_from_logits(model.config.head_mode, z, nullptr);
}

LossBreakdown batch_loss(const EncoderModel& model, const std::vector<BatchEntry>& batch,
                         const LossSpec& spec, bool train_mode, std::uint64_t step_seed) {
    return batch_pass(model, batch, spec, nullptr, train_mode, step_seed);
}

LossBreakdown batch_gradients(const EncoderModel& model, const std::vector<BatchEntry>& batch,
                              const LossSpec& spec, Parameters& grads, bool train_mode,
                              std::uint64_t step_seed) {
    return batch_pass(model, batch, spec, &grads, train_mode, step_seed);
}

AdamOptimizer::AdamOptimizer(const ModelConfig& config, const AdamConfig& adam)
    : cfg_(adam), m_(Parameters::zeros_like(config)), v_(Parameters::zeros_like(config)) {}

void AdamOptimizer::step(Parameters& params, const Parameters& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    std::vector<std::pair<std::string, Matrix*>> ps, ms, vs;
    std::vector<const Matrix*> gs;
    params.for_each([&](const std::string& n, Matrix& m) { ps.emplace_back(n, &m); });
    m_.for_each([&](const std::string& n, Matrix& m) { ms.emplace_back(n, &m); });
    v_.for_each([&](const std::string& n, Matrix& m) { vs.emplace_back(n, &m); });
    grads.for_each([&](const std::string&, const Matrix& m) { gs.push_back(&m); });
    if (ps.size() != gs.size() || ps.size() != ms.size()) {
        throw DataError("optimizer state does not match the parameter layout");
    }

    for (std::size_t t = 0; t < ps.size(); ++t) {
        Matrix& p = *ps[t].second;
        Matrix& m = *ms[t].second;
        Matrix& v = *vs[t].second;
        const Matrix& g = *gs[t];
        if (!p.same_shape(g)) throw DataError("gradient shape mismatch at " + ps[t].first);
        const double lr = cfg_.learning_rate *
                          (is_embedding_tensor(ps[t].first) ? cfg_.embedding_lr_scale : 1.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

void save_checkpoint(const EncoderModel& model, const std::string& path, std::uint64_t seed,
                     const std::string& config_hash) {
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t payload = 0;
    model.params.for_each([&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        payload += m.size();
    });
    nlohmann::json header{{"version", 1},
                          {"seed", seed},
                          {"config_hash", config_hash},
                          {"config", config_to_json(model.config)},
                          {"tensors", tensors}};
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    std::vector<float> buf;
    buf.reserve(payload);
    model.params.for_each([&](const std::string&, const Matrix& m) {
        for (std::size_t i = 0; i < m.size(); ++i) buf.push_back(static_cast<float>(m[i]));
    });
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw DataError("not a model checkpoint: " + path);
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len == 0 || len > (1u << 20)) throw DataError("corrupt checkpoint header: " + path);
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("corrupt checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    try {
        const int version = header.at("version").get<int>();
        if (version != 1) {
            throw DataError("unsupported checkpoint version " + std::to_string(version));
        }
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.config_hash = header.at("config_hash").get<std::string>();
        ckpt.model.config = config_from_json(header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header: " + std::string(e.what()));
    }
    ckpt.model.config.validate();
    ckpt.model.params = Parameters::zeros_like(ckpt.model.config);

    std::size_t idx = 0;
    const nlohmann::json& tensors = header.at("tensors");
    ckpt.model.params.for_each([&](const std::string& name, Matrix& m) {
        if (idx >= tensors.size()) throw DataError("checkpoint tensor directory is too short");
        const nlohmann::json& t = tensors.at(idx++);
        if (t.at("name").get<std::string>() != name ||
            t.at("rows").get<std::size_t>() != m.rows() ||
            t.at("cols").get<std::size_t>() != m.cols()) {
            throw DataError("checkpoint tensor " + name + " does not match the stored layout");
        }
        std::vector<float> buf(m.size());
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw DataError("checkpoint payload truncated at " + name);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(buf[i]);
    });
    if (idx != tensors.size()) throw DataError("checkpoint tensor directory is too long");
    return ckpt;
}

}  // namespace masker::model
