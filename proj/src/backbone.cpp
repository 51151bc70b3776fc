#include "memoir/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "memoir/bin_io.hpp"
#include "memoir/rng.hpp"

namespace memoir {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// y = g (x - mu) rstd + b; xhat and rstd are kept for the backward pass
void layernorm_fwd(const double* x, const double* g, const double* b, int n, double* xhat,
                   double* rstd_out, double* y) {
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += x[i];
    mu /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = x[i] - mu;
        var += d * d;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mu) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
    *rstd_out = rstd;
}

// accumulates dx; dg/db may be null when parameter grads are not needed
void layernorm_bwd(const double* dy, const double* xhat, double rstd, const double* g, int n,
                   double* dx, double* dg, double* db) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for (int i = 0; i < n; ++i) {
        const double dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
    if (dg) {
        for (int i = 0; i < n; ++i) {
            dg[i] += dy[i] * xhat[i];
            db[i] += dy[i];
        }
    }
}

inline void apply_hook_row(const FfnMemoryHook& hook, const double* a_row, double* out_row, int d) {
    const Mat& wm = *hook.w_mem;
    for (uint32_t j : hook.active) {
        const double aj = a_row[j];
        if (aj == 0.0) continue;
        const double* col = wm.v.data() + j;
        for (int i = 0; i < d; ++i) out_row[i] += col[static_cast<size_t>(i) * wm.cols] * aj;
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// config / init
// ---------------------------------------------------------------------------

void BackboneConfig::validate() const {
    if (vocab_size < 2 || vocab_size > 65536) throw std::invalid_argument("config: vocab_size out of range");
    if (d_ffn < 8) throw std::invalid_argument("config: d_ffn must be >= 8");
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (edit_layer_index < 0 || edit_layer_index >= n_layers)
        throw std::invalid_argument("config: edit_layer_index must be < n_layers");
    if (n_heads < 1 || d_model % n_heads != 0)
        throw std::invalid_argument("config: d_model must be divisible by n_heads");
    if (max_seq_len < 2) throw std::invalid_argument("config: max_seq_len too small");
}

BackboneModel init_model(const BackboneConfig& cfg) {
    cfg.validate();
    BackboneModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(cfg.rng_seed, 0xb0dc));

    const double std0 = 0.08;
    const double resid_std = std0 / std::sqrt(2.0 * cfg.n_layers);
    auto fill = [&rng](Mat& w, int r, int c, double sd) {
        w.resize(r, c);
        for (auto& x : w.v) x = sd * rng.next_gaussian();
    };

    fill(m.tok_emb, cfg.vocab_size, cfg.d_model, std0);
    fill(m.pos_emb, cfg.max_seq_len, cfg.d_model, std0);
    m.blocks.resize(cfg.n_layers);
    for (auto& b : m.blocks) {
        fill(b.wq, cfg.d_model, cfg.d_model, std0);
        fill(b.wk, cfg.d_model, cfg.d_model, std0);
        fill(b.wv, cfg.d_model, cfg.d_model, std0);
        fill(b.wo, cfg.d_model, cfg.d_model, resid_std);
        b.ln1_g.assign(cfg.d_model, 1.0);
        b.ln1_b.assign(cfg.d_model, 0.0);
        b.ln2_g.assign(cfg.d_model, 1.0);
        b.ln2_b.assign(cfg.d_model, 0.0);
        fill(b.w_fc, cfg.d_ffn, cfg.d_model, std0);
        b.b_fc.assign(cfg.d_ffn, 0.0);
        fill(b.w_proj, cfg.d_model, cfg.d_ffn, resid_std);
        b.b_proj.assign(cfg.d_model, 0.0);
    }
    m.lnf_g.assign(cfg.d_model, 1.0);
    m.lnf_b.assign(cfg.d_model, 0.0);
    fill(m.w_un, cfg.vocab_size, cfg.d_model, std0);
    return m;
}

uint64_t weight_checksum(const BackboneModel& m) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto eat_vec = [&h](const Vec& v) { h = fnv1a64(v.data(), v.size() * sizeof(double), h); };
    auto eat_mat = [&h](const Mat& w) { h = fnv1a64(w.v.data(), w.v.size() * sizeof(double), h); };
    eat_mat(m.tok_emb);
    eat_mat(m.pos_emb);
    for (const auto& b : m.blocks) {
        eat_mat(b.wq);
        eat_mat(b.wk);
        eat_mat(b.wv);
        eat_mat(b.wo);
        eat_vec(b.ln1_g);
        eat_vec(b.ln1_b);
        eat_vec(b.ln2_g);
        eat_vec(b.ln2_b);
        eat_mat(b.w_fc);
        eat_vec(b.b_fc);
        eat_mat(b.w_proj);
        eat_vec(b.b_proj);
    }
    eat_vec(m.lnf_g);
    eat_vec(m.lnf_b);
    eat_mat(m.w_un);
    return h;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {
constexpr uint32_t kCkptMagic = 0x4b43424d;  // "MBCK"
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const BackboneModel& m, const std::string& path) {
    BinWriter w;
    w.u32(kCkptMagic);
    w.u32(kCkptVersion);
    w.i64(m.cfg.vocab_size);
    w.i64(m.cfg.d_model);
    w.i64(m.cfg.n_layers);
    w.i64(m.cfg.n_heads);
    w.i64(m.cfg.d_ffn);
    w.i64(m.cfg.max_seq_len);
    w.i64(m.cfg.edit_layer_index);
    w.u64(m.cfg.rng_seed);
    w.mat(m.tok_emb);
    w.mat(m.pos_emb);
    for (const auto& b : m.blocks) {
        w.mat(b.wq);
        w.mat(b.wk);
        w.mat(b.wv);
        w.mat(b.wo);
        w.vec(b.ln1_g);
        w.vec(b.ln1_b);
        w.vec(b.ln2_g);
        w.vec(b.ln2_b);
        w.mat(b.w_fc);
        w.vec(b.b_fc);
        w.mat(b.w_proj);
        w.vec(b.b_proj);
    }
    w.vec(m.lnf_g);
    w.vec(m.lnf_b);
    w.mat(m.w_un);
    w.save(path);
}

BackboneModel load_checkpoint(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    if (r.u32() != kCkptMagic) throw std::runtime_error("version: not a backbone checkpoint: " + path);
    if (r.u32() != kCkptVersion) throw std::runtime_error("version: unsupported checkpoint version in " + path);
    BackboneModel m;
    m.cfg.vocab_size = static_cast<int>(r.i64());
    m.cfg.d_model = static_cast<int>(r.i64());
    m.cfg.n_layers = static_cast<int>(r.i64());
    m.cfg.n_heads = static_cast<int>(r.i64());
    m.cfg.d_ffn = static_cast<int>(r.i64());
    m.cfg.max_seq_len = static_cast<int>(r.i64());
    m.cfg.edit_layer_index = static_cast<int>(r.i64());
    m.cfg.rng_seed = r.u64();
    m.cfg.validate();
    m.tok_emb = r.mat();
    m.pos_emb = r.mat();
    m.blocks.resize(m.cfg.n_layers);
    for (auto& b : m.blocks) {
        b.wq = r.mat();
        b.wk = r.mat();
        b.wv = r.mat();
        b.wo = r.mat();
        b.ln1_g = r.vec();
        b.ln1_b = r.vec();
        b.ln2_g = r.vec();
        b.ln2_b = r.vec();
        b.w_fc = r.mat();
        b.b_fc = r.vec();
        b.w_proj = r.mat();
        b.b_proj = r.vec();
    }
    m.lnf_g = r.vec();
    m.lnf_b = r.vec();
    m.w_un = r.mat();
    return m;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

void resize_cache(const BackboneConfig& cfg, int T, ForwardCache& c) {
    c.T = T;
    c.x0.resize(T, cfg.d_model);
    c.blocks.resize(cfg.n_layers);
    for (auto& b : c.blocks) {
        b.xin.resize(T, cfg.d_model);
        b.xhat1.resize(T, cfg.d_model);
        b.rstd1.assign(T, 0.0);
        b.q.resize(T, cfg.d_model);
        b.k.resize(T, cfg.d_model);
        b.v.resize(T, cfg.d_model);
        b.att.resize(cfg.n_heads * T, T);
        b.ho.resize(T, cfg.d_model);
        b.x1.resize(T, cfg.d_model);
        b.xhat2.resize(T, cfg.d_model);
        b.rstd2.assign(T, 0.0);
        b.ffn_pre.resize(T, cfg.d_ffn);
        b.a.resize(T, cfg.d_ffn);
        b.f.resize(T, cfg.d_model);
    }
    c.xhatf.resize(T, cfg.d_model);
    c.rstdf.assign(T, 0.0);
    c.logits.resize(T, cfg.vocab_size);
}

// causal attention for one block over the whole sequence
void attention_fwd(const BackboneConfig& cfg, BlockCache& bc) {
    const int T = bc.q.rows;
    const int H = cfg.n_heads;
    const int hd = cfg.d_model / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> scores(T);
    for (int h = 0; h < H; ++h) {
        const int off = h * hd;
        for (int t = 0; t < T; ++t) {
            const double* qt = bc.q.row(t) + off;
            double maxv = -1e300;
            for (int s = 0; s <= t; ++s) {
                const double* ks = bc.k.row(s) + off;
                double dot = 0.0;
                for (int i = 0; i < hd; ++i) dot += qt[i] * ks[i];
                scores[s] = dot * scale;
                maxv = std::max(maxv, scores[s]);
            }
            double denom = 0.0;
            for (int s = 0; s <= t; ++s) {
                scores[s] = std::exp(scores[s] - maxv);
                denom += scores[s];
            }
            double* att_row = bc.att.row(h * T + t);
            const double inv = 1.0 / denom;
            for (int s = 0; s <= t; ++s) att_row[s] = scores[s] * inv;
            double* out = bc.ho.row(t) + off;
            std::fill(out, out + hd, 0.0);
            for (int s = 0; s <= t; ++s) {
                const double w = att_row[s];
                const double* vs = bc.v.row(s) + off;
                for (int i = 0; i < hd; ++i) out[i] += w * vs[i];
            }
        }
    }
}

}  // namespace

void forward(const BackboneModel& m, const std::vector<int>& tokens, const FfnMemoryHook* hook,
             ForwardCache& cache) {
    const auto& cfg = m.cfg;
    const int T = static_cast<int>(tokens.size());
    if (T < 1) throw std::invalid_argument("forward: empty token sequence");
    if (T > cfg.max_seq_len) throw std::invalid_argument("length: sequence exceeds max_seq_len");
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("tokens: id out of vocab range");
    resize_cache(cfg, T, cache);

    const int d = cfg.d_model;
    for (int t = 0; t < T; ++t) {
        const double* te = m.tok_emb.row(tokens[t]);
        const double* pe = m.pos_emb.row(t);
        double* x = cache.x0.row(t);
        for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];
    }

    const Mat* x_in = &cache.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& bw = m.blocks[l];
        auto& bc = cache.blocks[l];
        bc.xin = *x_in;
        for (int t = 0; t < T; ++t) {
            Vec n1(d);
            layernorm_fwd(bc.xin.row(t), bw.ln1_g.data(), bw.ln1_b.data(), d, bc.xhat1.row(t),
                          &bc.rstd1[t], n1.data());
            matvec(bw.wq, n1.data(), bc.q.row(t));
            matvec(bw.wk, n1.data(), bc.k.row(t));
            matvec(bw.wv, n1.data(), bc.v.row(t));
        }
        attention_fwd(cfg, bc);
        for (int t = 0; t < T; ++t) {
            double* x1 = bc.x1.row(t);
            matvec(bw.wo, bc.ho.row(t), x1);
            vec_add_inplace(x1, bc.xin.row(t), d);
        }
        const bool hooked = hook != nullptr && l == cfg.edit_layer_index;
        for (int t = 0; t < T; ++t) {
            Vec n2(d);
            layernorm_fwd(bc.x1.row(t), bw.ln2_g.data(), bw.ln2_b.data(), d, bc.xhat2.row(t),
                          &bc.rstd2[t], n2.data());
            double* pre = bc.ffn_pre.row(t);
            matvec(bw.w_fc, n2.data(), pre);
            vec_add_inplace(pre, bw.b_fc.data(), cfg.d_ffn);
            double* a = bc.a.row(t);
            for (int j = 0; j < cfg.d_ffn; ++j) a[j] = gelu(pre[j]);
            double* f = bc.f.row(t);
            matvec(bw.w_proj, a, f);
            vec_add_inplace(f, bw.b_proj.data(), d);
            if (hooked) apply_hook_row(*hook, a, f, d);
            // final residual written in place over x1 copy
        }
        // x_out = x1 + f, stored by reusing xin of next block or the final buffer
        Mat* x_next = (l + 1 < cfg.n_layers) ? &cache.blocks[l + 1].xin : nullptr;
        if (x_next) {
            x_next->resize(T, d);
            for (int t = 0; t < T; ++t) {
                const double* x1 = bc.x1.row(t);
                const double* f = bc.f.row(t);
                double* xo = x_next->row(t);
                for (int i = 0; i < d; ++i) xo[i] = x1[i] + f[i];
            }
            x_in = x_next;
        }
    }

    // final layernorm + unembedding (block output recomputed from last block)
    const auto& last = cache.blocks[cfg.n_layers - 1];
    Vec xo(d), nf(d);
    for (int t = 0; t < T; ++t) {
        const double* x1 = last.x1.row(t);
        const double* f = last.f.row(t);
        for (int i = 0; i < d; ++i) xo[i] = x1[i] + f[i];
        layernorm_fwd(xo.data(), m.lnf_g.data(), m.lnf_b.data(), d, cache.xhatf.row(t),
                      &cache.rstdf[t], nf.data());
        matvec(m.w_un, nf.data(), cache.logits.row(t));
    }
}

double sequence_loss(const ForwardCache& cache, const std::vector<int>& tokens, int target_begin) {
    const int T = cache.T;
    if (target_begin < 1 || target_begin >= T) throw std::invalid_argument("loss: bad target_begin");
    const int V = cache.logits.cols;
    double total = 0.0;
    int n = 0;
    for (int i = target_begin; i < T; ++i) {
        const double* lg = cache.logits.row(i - 1);
        double maxv = lg[0];
        for (int v = 1; v < V; ++v) maxv = std::max(maxv, lg[v]);
        double denom = 0.0;
        for (int v = 0; v < V; ++v) denom += std::exp(lg[v] - maxv);
        total += std::log(denom) + maxv - lg[tokens[i]];
        ++n;
    }
    return total / n;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Gradients::init(const BackboneConfig& cfg) {
    tok_emb.resize(cfg.vocab_size, cfg.d_model);
    pos_emb.resize(cfg.max_seq_len, cfg.d_model);
    blocks.resize(cfg.n_layers);
    for (auto& b : blocks) {
        b.wq.resize(cfg.d_model, cfg.d_model);
        b.wk.resize(cfg.d_model, cfg.d_model);
        b.wv.resize(cfg.d_model, cfg.d_model);
        b.wo.resize(cfg.d_model, cfg.d_model);
        b.ln1_g.assign(cfg.d_model, 0.0);
        b.ln1_b.assign(cfg.d_model, 0.0);
        b.ln2_g.assign(cfg.d_model, 0.0);
        b.ln2_b.assign(cfg.d_model, 0.0);
        b.w_fc.resize(cfg.d_ffn, cfg.d_model);
        b.b_fc.assign(cfg.d_ffn, 0.0);
        b.w_proj.resize(cfg.d_model, cfg.d_ffn);
        b.b_proj.assign(cfg.d_model, 0.0);
    }
    lnf_g.assign(cfg.d_model, 0.0);
    lnf_b.assign(cfg.d_model, 0.0);
    w_un.resize(cfg.vocab_size, cfg.d_model);
}

void Gradients::zero() {
    tok_emb.zero();
    pos_emb.zero();
    for (auto& b : blocks) {
        b.wq.zero();
        b.wk.zero();
        b.wv.zero();
        b.wo.zero();
        std::fill(b.ln1_g.begin(), b.ln1_g.end(), 0.0);
        std::fill(b.ln1_b.begin(), b.ln1_b.end(), 0.0);
        std::fill(b.ln2_g.begin(), b.ln2_g.end(), 0.0);
        std::fill(b.ln2_b.begin(), b.ln2_b.end(), 0.0);
        b.w_fc.zero();
        std::fill(b.b_fc.begin(), b.b_fc.end(), 0.0);
        b.w_proj.zero();
        std::fill(b.b_proj.begin(), b.b_proj.end(), 0.0);
    }
    std::fill(lnf_g.begin(), lnf_g.end(), 0.0);
    std::fill(lnf_b.begin(), lnf_b.end(), 0.0);
    w_un.zero();
}

double backward(const BackboneModel& m, const ForwardCache& cache, const std::vector<int>& tokens,
                int target_begin, const FfnMemoryHook* hook, Gradients* grads, Mat* d_edit_ffn_out) {
    const int T = cache.T;
    if (target_begin < 1 || target_begin >= T) throw std::invalid_argument("loss: bad target_begin");
    const int n_supervised = T - target_begin;
    std::vector<SupervisedToken> supervision;
    supervision.reserve(n_supervised);
    for (int i = target_begin; i < T; ++i)
        supervision.push_back({i - 1, tokens[i], 1.0 / n_supervised});
    return backward_weighted(m, cache, tokens, supervision, hook, grads, d_edit_ffn_out);
}

double backward_weighted(const BackboneModel& m, const ForwardCache& cache,
                         const std::vector<int>& tokens,
                         const std::vector<SupervisedToken>& supervision, const FfnMemoryHook* hook,
                         Gradients* grads, Mat* d_edit_ffn_out) {
    const auto& cfg = m.cfg;
    const int T = cache.T;
    const int d = cfg.d_model;
    const int D = cfg.d_ffn;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (supervision.empty()) throw std::invalid_argument("loss: empty supervision set");

    // softmax cross-entropy and dlogits
    double loss = 0.0;
    Mat dlogits(T, V);
    std::vector<uint8_t> row_used(T, 0);
    int first_row = T, last_row = 0;
    for (const auto& sup : supervision) {
        if (sup.position < 0 || sup.position >= T) throw std::invalid_argument("loss: bad position");
        if (sup.token < 0 || sup.token >= V) throw std::invalid_argument("loss: bad target token");
        const double* lg = cache.logits.row(sup.position);
        double* dl = dlogits.row(sup.position);
        double maxv = lg[0];
        for (int v = 1; v < V; ++v) maxv = std::max(maxv, lg[v]);
        double denom = 0.0;
        for (int v = 0; v < V; ++v) denom += std::exp(lg[v] - maxv);
        const double inv = 1.0 / denom;
        for (int v = 0; v < V; ++v) dl[v] += sup.weight * std::exp(lg[v] - maxv) * inv;
        dl[sup.token] -= sup.weight;
        loss += sup.weight * (std::log(denom) + maxv - lg[sup.token]);
        row_used[sup.position] = 1;
        first_row = std::min(first_row, sup.position);
        last_row = std::max(last_row, sup.position);
    }

    // unembedding + final layernorm; rows without supervision carry no
    // gradient and are skipped
    Mat dx(T, d);
    for (int t = first_row; t <= last_row; ++t) {
        if (!row_used[t]) continue;
        const double* dl = dlogits.row(t);
        Vec dnf(d, 0.0);
        matvec_transposed_add(m.w_un, dl, dnf.data());
        if (grads) {
            for (int v = 0; v < V; ++v) {
                const double g = dl[v];
                if (g == 0.0) continue;
                double* wrow = grads->w_un.row(v);
                const double* xh = cache.xhatf.row(t);
                // w_un consumed nf = g*xhat + b
                for (int i = 0; i < d; ++i)
                    wrow[i] += g * (m.lnf_g[i] * xh[i] + m.lnf_b[i]);
            }
        }
        layernorm_bwd(dnf.data(), cache.xhatf.row(t), cache.rstdf[t], m.lnf_g.data(), d, dx.row(t),
                      grads ? grads->lnf_g.data() : nullptr, grads ? grads->lnf_b.data() : nullptr);
    }

    Mat dn1(T, d), dq(T, d), dk(T, d), dv(T, d), dho(T, d);
    Vec da(D), dp(D), dn2(d);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& bw = m.blocks[l];
        const auto& bc = cache.blocks[l];
        const bool hooked = hook != nullptr && l == cfg.edit_layer_index;

        // FFN backward; dx currently holds d(block output)
        if (d_edit_ffn_out && l == cfg.edit_layer_index) {
            *d_edit_ffn_out = dx;  // gradient w.r.t. the edited layer's FFN output
            if (!grads) return loss;
        }
        for (int t = 0; t < T; ++t) {
            const double* df = dx.row(t);  // residual: d f equals d x_out
            std::fill(da.begin(), da.end(), 0.0);
            matvec_transposed_add(bw.w_proj, df, da.data());
            if (hooked) {
                const Mat& wm = *hook->w_mem;
                for (uint32_t j : hook->active) {
                    double acc = 0.0;
                    const double* col = wm.v.data() + j;
                    for (int i = 0; i < d; ++i) acc += col[static_cast<size_t>(i) * wm.cols] * df[i];
                    da[j] += acc;
                }
            }
            if (grads) {
                const double* a = bc.a.row(t);
                for (int i = 0; i < d; ++i) {
                    const double g = df[i];
                    if (g == 0.0) continue;
                    double* wrow = grads->blocks[l].w_proj.row(i);
                    for (int j = 0; j < D; ++j) wrow[j] += g * a[j];
                    grads->blocks[l].b_proj[i] += g;
                }
            }
            const double* pre = bc.ffn_pre.row(t);
            for (int j = 0; j < D; ++j) dp[j] = da[j] * gelu_grad(pre[j]);
            std::fill(dn2.begin(), dn2.end(), 0.0);
            matvec_transposed_add(bw.w_fc, dp.data(), dn2.data());
            if (grads) {
                const double* xh2 = bc.xhat2.row(t);
                for (int j = 0; j < D; ++j) {
                    const double g = dp[j];
                    if (g == 0.0) continue;
                    double* wrow = grads->blocks[l].w_fc.row(j);
                    for (int i = 0; i < d; ++i)
                        wrow[i] += g * (bw.ln2_g[i] * xh2[i] + bw.ln2_b[i]);
                    grads->blocks[l].b_fc[j] += g;
                }
            }
            // d x1 = d x_out (residual) + ln2 backward
            layernorm_bwd(dn2.data(), bc.xhat2.row(t), bc.rstd2[t], bw.ln2_g.data(), d, dx.row(t),
                          grads ? grads->blocks[l].ln2_g.data() : nullptr,
                          grads ? grads->blocks[l].ln2_b.data() : nullptr);
        }

        // attention backward; dx holds d x1 now
        dho.zero();
        dq.zero();
        dk.zero();
        dv.zero();
        for (int t = 0; t < T; ++t) {
            const double* dao = dx.row(t);
            matvec_transposed_add(bw.wo, dao, dho.row(t));
            if (grads) {
                const double* ho = bc.ho.row(t);
                for (int i = 0; i < d; ++i) {
                    const double g = dao[i];
                    if (g == 0.0) continue;
                    double* wrow = grads->blocks[l].wo.row(i);
                    for (int j = 0; j < d; ++j) wrow[j] += g * ho[j];
                }
            }
        }
        Vec datt;
        for (int h = 0; h < H; ++h) {
            const int off = h * hd;
            for (int t = 0; t < T; ++t) {
                const double* att_row = bc.att.row(h * T + t);
                const double* dho_t = dho.row(t) + off;
                datt.assign(t + 1, 0.0);
                for (int s = 0; s <= t; ++s) {
                    const double* vs = bc.v.row(s) + off;
                    double dot = 0.0;
                    for (int i = 0; i < hd; ++i) dot += dho_t[i] * vs[i];
                    datt[s] = dot;
                    double* dvs = dv.row(s) + off;
                    const double w = att_row[s];
                    for (int i = 0; i < hd; ++i) dvs[i] += w * dho_t[i];
                }
                double sum = 0.0;
                for (int s = 0; s <= t; ++s) sum += att_row[s] * datt[s];
                double* dqt = dq.row(t) + off;
                const double* qt = bc.q.row(t) + off;
                for (int s = 0; s <= t; ++s) {
                    const double ds = att_row[s] * (datt[s] - sum) * scale;
                    if (ds == 0.0) continue;
                    const double* ks = bc.k.row(s) + off;
                    double* dks = dk.row(s) + off;
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ks[i];
                        dks[i] += ds * qt[i];
                    }
                }
            }
        }
        dn1.zero();
        for (int t = 0; t < T; ++t) {
            matvec_transposed_add(bw.wq, dq.row(t), dn1.row(t));
            matvec_transposed_add(bw.wk, dk.row(t), dn1.row(t));
            matvec_transposed_add(bw.wv, dv.row(t), dn1.row(t));
            if (grads) {
                const double* xh1 = bc.xhat1.row(t);
                Vec n1(d);
                for (int i = 0; i < d; ++i) n1[i] = bw.ln1_g[i] * xh1[i] + bw.ln1_b[i];
                auto& gb = grads->blocks[l];
                for (int i = 0; i < d; ++i) {
                    const double gq = dq.at(t, i), gk = dk.at(t, i), gv = dv.at(t, i);
                    double* wq_row = gb.wq.row(i);
                    double* wk_row = gb.wk.row(i);
                    double* wv_row = gb.wv.row(i);
                    for (int j = 0; j < d; ++j) {
                        wq_row[j] += gq * n1[j];
                        wk_row[j] += gk * n1[j];
                        wv_row[j] += gv * n1[j];
                    }
                }
            }
            // d xin = d x1 (residual) + ln1 backward
            layernorm_bwd(dn1.row(t), bc.xhat1.row(t), bc.rstd1[t], bw.ln1_g.data(), d, dx.row(t),
                          grads ? grads->blocks[l].ln1_g.data() : nullptr,
                          grads ? grads->blocks[l].ln1_b.data() : nullptr);
        }
    }

    if (grads) {
        for (int t = 0; t < T; ++t) {
            const double* g = dx.row(t);
            double* te = grads->tok_emb.row(tokens[t]);
            double* pe = grads->pos_emb.row(t);
            for (int i = 0; i < d; ++i) {
                te[i] += g[i];
                pe[i] += g[i];
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// incremental decoding
// ---------------------------------------------------------------------------

KvCache::KvCache(const BackboneConfig& cfg) {
    k.resize(cfg.n_layers);
    v.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        k[l].resize(cfg.max_seq_len, cfg.d_model);
        v[l].resize(cfg.max_seq_len, cfg.d_model);
    }
}

void decode_step(const BackboneModel& m, const FfnMemoryHook* hook, KvCache& cache, int token,
                 Vec& logits_out) {
    const auto& cfg = m.cfg;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int pos = cache.len;
    if (pos >= cfg.max_seq_len) throw std::invalid_argument("length: decode exceeds max_seq_len");
    if (token < 0 || token >= cfg.vocab_size) throw std::invalid_argument("tokens: id out of vocab range");

    Vec x(d), n1(d), q(d), xhat(d), ho(d), tmp(d), n2(d), pre(cfg.d_ffn), a(cfg.d_ffn), f(d);
    double rstd = 0.0;
    const double* te = m.tok_emb.row(token);
    const double* pe = m.pos_emb.row(pos);
    for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];

    std::vector<double> att(pos + 1);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& bw = m.blocks[l];
        layernorm_fwd(x.data(), bw.ln1_g.data(), bw.ln1_b.data(), d, xhat.data(), &rstd, n1.data());
        matvec(bw.wq, n1.data(), q.data());
        matvec(bw.wk, n1.data(), cache.k[l].row(pos));
        matvec(bw.wv, n1.data(), cache.v[l].row(pos));
        for (int h = 0; h < H; ++h) {
            const int off = h * hd;
            double maxv = -1e300;
            for (int s = 0; s <= pos; ++s) {
                const double* ks = cache.k[l].row(s) + off;
                double dot = 0.0;
                for (int i = 0; i < hd; ++i) dot += q[off + i] * ks[i];
                att[s] = dot * scale;
                maxv = std::max(maxv, att[s]);
            }
            double denom = 0.0;
            for (int s = 0; s <= pos; ++s) {
                att[s] = std::exp(att[s] - maxv);
                denom += att[s];
            }
            const double inv = 1.0 / denom;
            double* out = ho.data() + off;
            std::fill(out, out + hd, 0.0);
            for (int s = 0; s <= pos; ++s) {
                const double w = att[s] * inv;
                const double* vs = cache.v[l].row(s) + off;
                for (int i = 0; i < hd; ++i) out[i] += w * vs[i];
            }
        }
        matvec(bw.wo, ho.data(), tmp.data());
        vec_add_inplace(x.data(), tmp.data(), d);

        layernorm_fwd(x.data(), bw.ln2_g.data(), bw.ln2_b.data(), d, xhat.data(), &rstd, n2.data());
        matvec(bw.w_fc, n2.data(), pre.data());
        vec_add_inplace(pre.data(), bw.b_fc.data(), cfg.d_ffn);
        for (int j = 0; j < cfg.d_ffn; ++j) a[j] = gelu(pre[j]);
        matvec(bw.w_proj, a.data(), f.data());
        vec_add_inplace(f.data(), bw.b_proj.data(), d);
        if (hook != nullptr && l == cfg.edit_layer_index) apply_hook_row(*hook, a.data(), f.data(), d);
        vec_add_inplace(x.data(), f.data(), d);
    }
    Vec nf(d);
    layernorm_fwd(x.data(), m.lnf_g.data(), m.lnf_b.data(), d, xhat.data(), &rstd, nf.data());
    logits_out.assign(cfg.vocab_size, 0.0);
    matvec(m.w_un, nf.data(), logits_out.data());
    cache.len = pos + 1;
}

GenerateResult generate(const BackboneModel& m, const FfnMemoryHook* hook,
                        const TokenSequence& prompt, int max_new, bool capture_logits) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    validate_tokens(prompt, m.cfg.vocab_size);
    if (1 + prompt.size() + max_new > m.cfg.max_seq_len)
        throw std::invalid_argument("length: prompt plus max_new exceeds max_seq_len");

    KvCache cache(m.cfg);
    Vec logits;
    decode_step(m, hook, cache, kBosToken, logits);
    for (int id : prompt.ids) decode_step(m, hook, cache, id, logits);

    GenerateResult res;
    res.tokens.role = TokenRole::target;
    for (int n = 0; n < max_new; ++n) {
        int best = 0;
        for (int v = 1; v < m.cfg.vocab_size; ++v)
            if (logits[v] > logits[best]) best = v;
        if (capture_logits) res.step_logits.push_back(logits);
        res.tokens.ids.push_back(best);
        if (n + 1 < max_new) decode_step(m, hook, cache, best, logits);
    }
    return res;
}

Mat ffn_input_activations(const BackboneModel& m, const TokenSequence& prompt) {
    const auto& cfg = m.cfg;
    validate_tokens(prompt, cfg.vocab_size);
    const int T = 1 + prompt.size();
    if (T > cfg.max_seq_len) throw std::invalid_argument("length: prompt exceeds max_seq_len");

    // frozen partial forward; only blocks up to the edit layer are computed
    std::vector<int> tokens(static_cast<size_t>(T));
    tokens[0] = kBosToken;
    for (int i = 0; i < prompt.size(); ++i) tokens[i + 1] = prompt.ids[i];

    const int d = cfg.d_model;
    Mat x(T, d);
    for (int t = 0; t < T; ++t) {
        const double* te = m.tok_emb.row(tokens[t]);
        const double* pe = m.pos_emb.row(t);
        double* xr = x.row(t);
        for (int i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
    }

    Mat result(prompt.size(), cfg.d_ffn);
    Vec n1(d), xhat(d), n2(d);
    double rstd = 0.0;
    for (int l = 0; l <= cfg.edit_layer_index; ++l) {
        const auto& bw = m.blocks[l];
        BlockCache bc;
        bc.q.resize(T, d);
        bc.k.resize(T, d);
        bc.v.resize(T, d);
        bc.att.resize(cfg.n_heads * T, T);
        bc.ho.resize(T, d);
        for (int t = 0; t < T; ++t) {
            layernorm_fwd(x.row(t), bw.ln1_g.data(), bw.ln1_b.data(), d, xhat.data(), &rstd, n1.data());
            matvec(bw.wq, n1.data(), bc.q.row(t));
            matvec(bw.wk, n1.data(), bc.k.row(t));
            matvec(bw.wv, n1.data(), bc.v.row(t));
        }
        attention_fwd(cfg, bc);
        for (int t = 0; t < T; ++t) {
            Vec ao(d);
            matvec(bw.wo, bc.ho.row(t), ao.data());
            vec_add_inplace(x.row(t), ao.data(), d);
        }
        if (l == cfg.edit_layer_index) {
            Vec pre(cfg.d_ffn);
            for (int t = 1; t < T; ++t) {  // BOS row excluded
                layernorm_fwd(x.row(t), bw.ln2_g.data(), bw.ln2_b.data(), d, xhat.data(), &rstd,
                              n2.data());
                matvec(bw.w_fc, n2.data(), pre.data());
                vec_add_inplace(pre.data(), bw.b_fc.data(), cfg.d_ffn);
                double* out = result.row(t - 1);
                for (int j = 0; j < cfg.d_ffn; ++j) out[j] = gelu(pre[j]);
            }
            break;
        }
        Vec f(d), pre(cfg.d_ffn), a(cfg.d_ffn);
        for (int t = 0; t < T; ++t) {
            layernorm_fwd(x.row(t), bw.ln2_g.data(), bw.ln2_b.data(), d, xhat.data(), &rstd, n2.data());
            matvec(bw.w_fc, n2.data(), pre.data());
            vec_add_inplace(pre.data(), bw.b_fc.data(), cfg.d_ffn);
            for (int j = 0; j < cfg.d_ffn; ++j) a[j] = gelu(pre[j]);
            matvec(bw.w_proj, a.data(), f.data());
            vec_add_inplace(f.data(), bw.b_proj.data(), d);
            vec_add_inplace(x.row(t), f.data(), d);
        }
    }
    return result;
}

double target_loss(const BackboneModel& m, const FfnMemoryHook* hook, const TokenSequence& prompt,
                   const TokenSequence& target) {
    validate_tokens(prompt, m.cfg.vocab_size);
    validate_tokens(target, m.cfg.vocab_size);
    std::vector<int> tokens;
    tokens.reserve(1 + prompt.ids.size() + target.ids.size());
    tokens.push_back(kBosToken);
    tokens.insert(tokens.end(), prompt.ids.begin(), prompt.ids.end());
    const int target_begin = static_cast<int>(tokens.size());
    tokens.insert(tokens.end(), target.ids.begin(), target.ids.end());
    ForwardCache cache;
    forward(m, tokens, hook, cache);
    return sequence_loss(cache, tokens, target_begin);
}

// ---------------------------------------------------------------------------
// pre-training
// ---------------------------------------------------------------------------

namespace {

struct TensorRef {
    double* p;
    size_t n;
};

std::vector<TensorRef> tensor_refs(BackboneModel& m) {
    std::vector<TensorRef> r;
    auto add_mat = [&r](Mat& w) { r.push_back({w.v.data(), w.v.size()}); };
    auto add_vec = [&r](Vec& v) { r.push_back({v.data(), v.size()}); };
    add_mat(m.tok_emb);
    add_mat(m.pos_emb);
    for (auto& b : m.blocks) {
        add_mat(b.wq);
        add_mat(b.wk);
        add_mat(b.wv);
        add_mat(b.wo);
        add_vec(b.ln1_g);
        add_vec(b.ln1_b);
        add_vec(b.ln2_g);
        add_vec(b.ln2_b);
        add_mat(b.w_fc);
        add_vec(b.b_fc);
        add_mat(b.w_proj);
        add_vec(b.b_proj);
    }
    add_vec(m.lnf_g);
    add_vec(m.lnf_b);
    add_mat(m.w_un);
    return r;
}

std::vector<TensorRef> tensor_refs(Gradients& g) {
    std::vector<TensorRef> r;
    auto add_mat = [&r](Mat& w) { r.push_back({w.v.data(), w.v.size()}); };
    auto add_vec = [&r](Vec& v) { r.push_back({v.data(), v.size()}); };
    add_mat(g.tok_emb);
    add_mat(g.pos_emb);
    for (auto& b : g.blocks) {
        add_mat(b.wq);
        add_mat(b.wk);
        add_mat(b.wv);
        add_mat(b.wo);
        add_vec(b.ln1_g);
        add_vec(b.ln1_b);
        add_vec(b.ln2_g);
        add_vec(b.ln2_b);
        add_mat(b.w_fc);
        add_vec(b.b_fc);
        add_mat(b.w_proj);
        add_vec(b.b_proj);
    }
    add_vec(g.lnf_g);
    add_vec(g.lnf_b);
    add_mat(g.w_un);
    return r;
}

}  // namespace

PretrainResult pretrain(const BackboneConfig& cfg, const std::vector<CorpusPair>& corpus, int steps,
                        const PretrainOptions& opts) {
    if (steps < 1) throw std::invalid_argument("pretrain: steps must be >= 1");
    if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
    for (const auto& pair : corpus) {
        const int len = 1 + pair.prompt.size() + pair.target.size();
        if (len > cfg.max_seq_len)
            throw std::invalid_argument("length: corpus sequence exceeds max_seq_len");
        validate_tokens(pair.prompt, cfg.vocab_size);
        validate_tokens(pair.target, cfg.vocab_size);
    }

    PretrainResult res;
    res.model = init_model(cfg);
    Gradients grads;
    grads.init(cfg);
    Gradients adam_m, adam_v;
    adam_m.init(cfg);
    adam_v.init(cfg);

    auto params = tensor_refs(res.model);
    auto gref = tensor_refs(grads);
    auto mref = tensor_refs(adam_m);
    auto vref = tensor_refs(adam_v);

    Rng rng(mix_seed(cfg.rng_seed, 0x9e37));
    ForwardCache cache;
    std::vector<int> tokens;

    for (int step = 0; step < steps; ++step) {
        grads.zero();
        double batch_loss = 0.0;
        for (int b = 0; b < opts.batch_size; ++b) {
            const auto& pair = corpus[rng.next_below(corpus.size())];
            tokens.clear();
            tokens.push_back(kBosToken);
            tokens.insert(tokens.end(), pair.prompt.ids.begin(), pair.prompt.ids.end());
            const int target_begin = static_cast<int>(tokens.size());
            tokens.insert(tokens.end(), pair.target.ids.begin(), pair.target.ids.end());
            forward(res.model, tokens, nullptr, cache);

            // answer tokens, plus an auxiliary head asking every prompt
            // position for the answer's distinguishing byte; this pushes the
            // answer identity into all token positions' activations, which is
            // what lets pooled keys cluster prompts by fact
            const int T = static_cast<int>(tokens.size());
            const int n_target = T - target_begin;
            std::vector<SupervisedToken> supervision;
            for (int i = target_begin; i < T; ++i)
                supervision.push_back({i - 1, tokens[i], 1.0 / n_target});
            if (opts.aux_answer_weight > 0.0 && target_begin >= 3) {
                const int aux_token =
                    pair.target.size() > 1 ? pair.target.ids[1] : pair.target.ids[0];
                const int n_aux = target_begin - 2;
                for (int p = 1; p <= target_begin - 2; ++p)
                    supervision.push_back({p, aux_token, opts.aux_answer_weight / n_aux});
            }
            batch_loss +=
                backward_weighted(res.model, cache, tokens, supervision, nullptr, &grads, nullptr);
        }
        batch_loss /= opts.batch_size;
        if (step == 0) res.first_loss = batch_loss;
        res.last_loss = batch_loss;
        if (step % 10 == 0) res.loss_history.push_back(batch_loss);
        if (opts.log_every > 0 && step % opts.log_every == 0)
            std::printf("pretrain step %6d  loss %.4f\n", step, batch_loss);

        // mean over batch, then global-norm clip
        double norm_sq = 0.0;
        const double inv_batch = 1.0 / opts.batch_size;
        for (auto& t : gref)
            for (size_t i = 0; i < t.n; ++i) {
                t.p[i] *= inv_batch;
                norm_sq += t.p[i] * t.p[i];
            }
        double clip_scale = 1.0;
        const double norm = std::sqrt(norm_sq);
        if (opts.grad_clip > 0.0 && norm > opts.grad_clip) clip_scale = opts.grad_clip / norm;

        // cosine decay to 10% of the base rate
        const double progress = static_cast<double>(step) / steps;
        const double lr = opts.lr * (0.55 + 0.45 * std::cos(progress * std::numbers::pi));
        const double bias1 = 1.0 - std::pow(opts.beta1, step + 1);
        const double bias2 = 1.0 - std::pow(opts.beta2, step + 1);
        for (size_t ti = 0; ti < params.size(); ++ti) {
            double* p = params[ti].p;
            double* g = gref[ti].p;
            double* am = mref[ti].p;
            double* av = vref[ti].p;
            for (size_t i = 0; i < params[ti].n; ++i) {
                const double gi = g[i] * clip_scale;
                am[i] = opts.beta1 * am[i] + (1.0 - opts.beta1) * gi;
                av[i] = opts.beta2 * av[i] + (1.0 - opts.beta2) * gi * gi;
                const double mhat = am[i] / bias1;
                const double vhat = av[i] / bias2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + opts.eps);
            }
        }
    }
    return res;
}

}  // namespace memoir
