#include "chunkq/critic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "chunkq/io.hpp"

namespace chunkq::critic {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x, double* deriv = nullptr) {
    // tanh approximation of the Gaussian-error linear unit
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    const double u = c * (x + a * x * x * x);
    const double t = std::tanh(u);
    if (deriv) *deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
    return 0.5 * x * (1.0 + t);
}

// y = W x + b with W row-major (rows x cols)
void matvec(const double* w, const double* b, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double acc = b ? b[r] : 0.0;
        const double* wr = w + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = acc;
    }
}

// accumulate dW += dy (x) x^T, db += dy, dx += W^T dy
void matvec_backward(const double* w, const double* x, const double* dy, double* dw, double* db,
                     double* dx, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double g = dy[r];
        if (db) db[r] += g;
        double* dwr = dw + static_cast<size_t>(r) * cols;
        const double* wr = w + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) {
            dwr[c] += g * x[c];
            if (dx) dx[c] += wr[c] * g;
        }
    }
}

void layernorm(const double* x, const double* g, const double* b, double* y, double* xhat,
               double* rstd_out, int d) {
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
    *rstd_out = rstd;
}

// dy -> dx (+=), dg (+=), db (+=)
void layernorm_backward(const double* dy, const double* xhat, double rstd, const double* g,
                        double* dx, double* dg, double* db, int d) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int i = 0; i < d; ++i) {
        const double dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

}  // namespace

void CriticConfig::validate() const {
    if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1)
        throw std::invalid_argument("CriticConfig: model dimensions must be >= 1");
    if (d_model % n_heads != 0) throw std::invalid_argument("CriticConfig: d_model % n_heads != 0");
    if (context_tokens < 1) throw std::invalid_argument("CriticConfig: context_tokens must be >= 1");
    if (proprio_dim < 1 || horizon < 1 || action_dim < 1)
        throw std::invalid_argument("CriticConfig: input dims must be set (>= 1)");
    for (int v : value_head)
        if (v < 1) throw std::invalid_argument("CriticConfig: zero-size value head layer");
    for (int v : mlp_hidden)
        if (v < 1) throw std::invalid_argument("CriticConfig: zero-size mlp layer");
}

nlohmann::json critic_config_to_json(const CriticConfig& c) {
    return nlohmann::json{{"variant", c.variant == Variant::Mlp ? "mlp" : "fusion"},
                          {"d_model", c.d_model},
                          {"n_heads", c.n_heads},
                          {"n_layers", c.n_layers},
                          {"d_ff", c.d_ff},
                          {"value_head", c.value_head},
                          {"mlp_hidden", c.mlp_hidden},
                          {"context_tokens", c.context_tokens},
                          {"proprio_dim", c.proprio_dim},
                          {"horizon", c.horizon},
                          {"action_dim", c.action_dim}};
}

CriticConfig critic_config_from_json(const nlohmann::json& j) {
    CriticConfig c;
    const std::string v = j.at("variant").get<std::string>();
    if (v == "mlp")
        c.variant = Variant::Mlp;
    else if (v == "fusion")
        c.variant = Variant::Fusion;
    else
        throw std::invalid_argument("unknown critic variant: " + v);
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.value_head = j.at("value_head").get<std::vector<int>>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
    c.context_tokens = j.at("context_tokens").get<int>();
    c.proprio_dim = j.at("proprio_dim").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.action_dim = j.at("action_dim").get<int>();
    c.validate();
    return c;
}

ContextFeatures make_context(const EnvState& state, const CriticConfig& config) {
    ContextFeatures ctx;
    ctx.n_tokens = config.context_tokens;
    ctx.width = config.d_model;
    ctx.tokens.assign(static_cast<size_t>(ctx.n_tokens) * ctx.width, 0.0);

    const size_t dp = state.proprio.size();
    std::vector<std::vector<double>> raw(static_cast<size_t>(ctx.n_tokens));
    raw[0] = state.proprio;
    if (ctx.n_tokens > 1) raw[1] = state.goal;
    if (ctx.n_tokens > 2) {
        raw[2].resize(dp);
        for (size_t j = 0; j < dp; ++j) raw[2][j] = state.goal[j] - state.proprio[j];
    }
    if (ctx.n_tokens > 3) {
        double dist = 0.0;
        for (size_t j = 0; j < dp; ++j) {
            const double d = state.goal[j] - state.proprio[j];
            dist += d * d;
        }
        raw[3] = {state.step_index / 32.0, std::sqrt(dist), 1.0};
    }
    for (int t = 0; t < ctx.n_tokens; ++t) {
        double* row = ctx.tokens.data() + static_cast<size_t>(t) * ctx.width;
        const auto& r = raw[static_cast<size_t>(t)];
        for (int j = 0; j < ctx.width; ++j) {
            if (j < static_cast<int>(r.size()))
                row[j] = r[static_cast<size_t>(j)];
            else
                row[j] = 0.1 * std::sin((t + 1) * (0.7 + 0.13 * j));  // fixed token tag
        }
    }
    return ctx;
}

size_t ParamLayout::add(const std::string& name, int rows, int cols) {
    TensorSpec spec;
    spec.name = name;
    spec.rows = rows;
    spec.cols = cols;
    spec.offset = total;
    total += spec.size();
    tensors.push_back(spec);
    return tensors.back().offset;
}

const TensorSpec& ParamLayout::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw std::invalid_argument("ParamLayout: unknown tensor " + name);
}

ParamLayout build_layout(const CriticConfig& config) {
    config.validate();
    ParamLayout layout;
    const int d = config.d_model;
    if (config.variant == Variant::Mlp) {
        std::vector<int> dims;
        // flattened chunk = zero-filled masked entries plus the mask bits
        dims.push_back(d + config.proprio_dim + config.horizon * (config.action_dim + 1));
        for (int hdim : config.mlp_hidden) dims.push_back(hdim);
        dims.push_back(1);
        for (size_t i = 0; i + 1 < dims.size(); ++i) {
            layout.add("mlp.w" + std::to_string(i), dims[i + 1], dims[i]);
            layout.add("mlp.b" + std::to_string(i), dims[i + 1], 1);
        }
        return layout;
    }
    layout.add("saf.wa", d, config.action_dim);
    layout.add("saf.ba", d, 1);
    layout.add("saf.wp", d, config.proprio_dim);
    layout.add("saf.bp", d, 1);
    layout.add("saf.wfuse", d, 2 * d);
    layout.add("saf.bfuse", d, 1);
    layout.add("pos", config.horizon, d);
    layout.add("value_token", 1, d);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "blk" + std::to_string(l) + ".";
        layout.add(p + "ln1.g", d, 1);
        layout.add(p + "ln1.b", d, 1);
        layout.add(p + "wq", d, d);
        layout.add(p + "bq", d, 1);
        layout.add(p + "wk", d, d);
        layout.add(p + "bk", d, 1);
        layout.add(p + "wv", d, d);
        layout.add(p + "bv", d, 1);
        layout.add(p + "wo", d, d);
        layout.add(p + "bo", d, 1);
        layout.add(p + "ln2.g", d, 1);
        layout.add(p + "ln2.b", d, 1);
        layout.add(p + "ff.w1", config.d_ff, d);
        layout.add(p + "ff.b1", config.d_ff, 1);
        layout.add(p + "ff.w2", d, config.d_ff);
        layout.add(p + "ff.b2", d, 1);
    }
    layout.add("lnf.g", d, 1);
    layout.add("lnf.b", d, 1);
    std::vector<int> dims;
    dims.push_back(d);
    for (int hdim : config.value_head) dims.push_back(hdim);
    dims.push_back(1);
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        layout.add("vh.w" + std::to_string(i), dims[i + 1], dims[i]);
        layout.add("vh.b" + std::to_string(i), dims[i + 1], 1);
    }
    return layout;
}

namespace {

void init_tensor(const TensorSpec& spec, std::span<double> dst, Rng& rng) {
    const bool is_bias = spec.cols == 1 && spec.name.find(".b") != std::string::npos;
    const bool is_gain = spec.name.size() >= 2 && spec.name.substr(spec.name.size() - 2) == ".g";
    if (is_gain) {
        for (size_t i = 0; i < spec.size(); ++i) dst[spec.offset + i] = 1.0;
        return;
    }
    if (is_bias) {
        for (size_t i = 0; i < spec.size(); ++i) dst[spec.offset + i] = 0.0;
        return;
    }
    const int fan_in = spec.cols;
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (size_t i = 0; i < spec.size(); ++i) dst[spec.offset + i] = rng.uniform(-scale, scale);
}

}  // namespace

CriticParams init(const CriticConfig& config, uint64_t seed) {
    CriticParams params;
    params.config = config;
    params.layout = build_layout(config);
    params.values.assign(2 * params.layout.total, 0.0);
    for (int t = 0; t < 2; ++t) {
        Rng rng = Rng::stream(seed, 0x9c71c, static_cast<uint64_t>(t));
        auto dst = params.twin(t);
        for (const auto& spec : params.layout.tensors) init_tensor(spec, dst, rng);
    }
    return params;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct Tape {
    Variant variant = Variant::Fusion;
    // mlp
    std::vector<double> mlp_x;
    std::vector<std::vector<double>> mlp_z;  // pre-activations per layer
    std::vector<std::vector<double>> mlp_a;  // layer inputs (a[0] = x)
    // fusion
    int n_tok = 0;
    int n_ctx = 0;
    int n_valid = 0;
    std::vector<double> proprio;
    std::vector<double> actions;  // n_valid x d_a
    std::vector<double> sa;       // n_valid x d : Wa a_k + ba
    std::vector<double> sp;       // d : Wp p + bp
    std::vector<double> x0;       // n_tok x d
    struct LayerTape {
        std::vector<double> x_in;
        std::vector<double> ln1_out, ln1_xhat, ln1_rstd;
        std::vector<double> q, k, v;
        std::vector<double> p;  // heads x n x n softmax rows
        std::vector<double> u;  // concat attention output
        std::vector<double> x_mid;
        std::vector<double> ln2_out, ln2_xhat, ln2_rstd;
        std::vector<double> ff_z, ff_g;
    };
    std::vector<LayerTape> layers;
    std::vector<double> x_final;  // n_tok x d
    std::vector<double> lnf_xhat;
    double lnf_rstd = 0.0;
    std::vector<std::vector<double>> vh_z;
    std::vector<std::vector<double>> vh_a;  // vh_a[0] = lnf output
};

Tape* tape_new() { return new Tape(); }
void tape_free(Tape* tape) { delete tape; }

namespace {

struct MlpRefs {
    std::vector<const TensorSpec*> w, b;
    std::vector<int> dims;
};

MlpRefs mlp_refs(const ParamLayout& layout, const std::string& prefix, int in_dim,
                 const std::vector<int>& hidden) {
    MlpRefs refs;
    refs.dims.push_back(in_dim);
    for (int hdim : hidden) refs.dims.push_back(hdim);
    refs.dims.push_back(1);
    for (size_t i = 0; i + 1 < refs.dims.size(); ++i) {
        refs.w.push_back(&layout.find(prefix + ".w" + std::to_string(i)));
        refs.b.push_back(&layout.find(prefix + ".b" + std::to_string(i)));
    }
    return refs;
}

// stack of linear layers with gelu between them (linear output)
double mlp_stack_forward(std::span<const double> theta, const MlpRefs& refs,
                         const std::vector<double>& x, std::vector<std::vector<double>>& z_tape,
                         std::vector<std::vector<double>>& a_tape) {
    z_tape.clear();
    a_tape.clear();
    a_tape.push_back(x);
    for (size_t i = 0; i < refs.w.size(); ++i) {
        const int rows = refs.dims[i + 1];
        const int cols = refs.dims[i];
        std::vector<double> z(static_cast<size_t>(rows));
        matvec(theta.data() + refs.w[i]->offset, theta.data() + refs.b[i]->offset,
               a_tape.back().data(), z.data(), rows, cols);
        z_tape.push_back(z);
        if (i + 1 < refs.w.size()) {
            for (double& v : z) v = gelu(v);
            a_tape.push_back(std::move(z));
        } else {
            return z[0];
        }
    }
    throw std::logic_error("mlp_stack_forward: empty stack");
}

// returns gradient w.r.t. the stack input
std::vector<double> mlp_stack_backward(std::span<const double> theta, const MlpRefs& refs,
                                       const std::vector<std::vector<double>>& z_tape,
                                       const std::vector<std::vector<double>>& a_tape,
                                       double upstream, std::span<double> grad) {
    std::vector<double> dout(1, upstream);
    for (size_t ri = refs.w.size(); ri-- > 0;) {
        const int rows = refs.dims[ri + 1];
        const int cols = refs.dims[ri];
        std::vector<double> dz;
        if (ri + 1 == refs.w.size()) {
            dz = dout;  // linear output layer
        } else {
            dz.assign(static_cast<size_t>(rows), 0.0);
            for (int r = 0; r < rows; ++r) {
                double deriv;
                gelu(z_tape[ri][static_cast<size_t>(r)], &deriv);
                dz[static_cast<size_t>(r)] = dout[static_cast<size_t>(r)] * deriv;
            }
        }
        std::vector<double> dx(static_cast<size_t>(cols), 0.0);
        matvec_backward(theta.data() + refs.w[ri]->offset, a_tape[ri].data(), dz.data(),
                        grad.data() + refs.w[ri]->offset, grad.data() + refs.b[ri]->offset,
                        dx.data(), rows, cols);
        dout = std::move(dx);
    }
    return dout;
}

void check_input(const CriticParams& params, const CriticInput& input) {
    const CriticConfig& cfg = params.config;
    if (!input.context || !input.chunk) throw std::invalid_argument("critic: null input");
    if (input.context->n_tokens != cfg.context_tokens || input.context->width != cfg.d_model)
        throw std::invalid_argument("critic: context shape mismatch");
    if (static_cast<int>(input.proprio.size()) != cfg.proprio_dim)
        throw std::invalid_argument("critic: proprio dim mismatch");
    if (input.chunk->horizon != cfg.horizon || input.chunk->action_dim != cfg.action_dim)
        throw std::invalid_argument("critic: chunk shape mismatch");
}

double forward_mlp_impl(const CriticParams& params, int twin, const CriticInput& input,
                        Tape& tape) {
    const CriticConfig& cfg = params.config;
    const auto theta = params.twin(twin);
    tape.variant = Variant::Mlp;

    std::vector<double> x;
    x.reserve(static_cast<size_t>(cfg.d_model + cfg.proprio_dim + cfg.horizon * cfg.action_dim));
    // pooled context: mean over tokens
    for (int j = 0; j < cfg.d_model; ++j) {
        double m = 0.0;
        for (int t = 0; t < cfg.context_tokens; ++t)
            m += input.context->tokens[static_cast<size_t>(t) * cfg.d_model + j];
        x.push_back(m / cfg.context_tokens);
    }
    for (double p : input.proprio) x.push_back(p);
    for (int k = 0; k < cfg.horizon; ++k) {
        for (int j = 0; j < cfg.action_dim; ++j)
            x.push_back(input.chunk->mask[static_cast<size_t>(k)] ? input.chunk->at(k, j) : 0.0);
        x.push_back(input.chunk->mask[static_cast<size_t>(k)] ? 1.0 : 0.0);
    }

    const MlpRefs refs = mlp_refs(params.layout, "mlp", static_cast<int>(x.size()), cfg.mlp_hidden);
    tape.mlp_x = x;
    return mlp_stack_forward(theta, refs, x, tape.mlp_z, tape.mlp_a);
}

void backward_mlp_impl(const CriticParams& params, int twin, const Tape& tape, double upstream,
                       std::span<double> grad) {
    const CriticConfig& cfg = params.config;
    const MlpRefs refs =
        mlp_refs(params.layout, "mlp", static_cast<int>(tape.mlp_x.size()), cfg.mlp_hidden);
    mlp_stack_backward(params.twin(twin), refs, tape.mlp_z, tape.mlp_a, upstream, grad);
}

double forward_fusion_impl(const CriticParams& params, int twin, const CriticInput& input,
                           Tape& tape) {
    const CriticConfig& cfg = params.config;
    const ParamLayout& L = params.layout;
    const auto theta = params.twin(twin);
    const double* th = theta.data();
    const int d = cfg.d_model;
    const int d_a = cfg.action_dim;
    const int H = cfg.n_heads;
    const int dh = d / H;

    tape.variant = Variant::Fusion;
    tape.n_ctx = cfg.context_tokens;
    tape.n_valid = input.chunk->valid_steps();
    tape.n_tok = tape.n_ctx + 1 + tape.n_valid + 1;
    tape.proprio.assign(input.proprio.begin(), input.proprio.end());
    tape.actions.assign(static_cast<size_t>(tape.n_valid) * d_a, 0.0);
    for (int k = 0; k < tape.n_valid; ++k)
        for (int j = 0; j < d_a; ++j) tape.actions[static_cast<size_t>(k) * d_a + j] = input.chunk->at(k, j);

    const int n = tape.n_tok;
    tape.x0.assign(static_cast<size_t>(n) * d, 0.0);

    // context tokens
    for (int t = 0; t < tape.n_ctx; ++t)
        std::copy_n(input.context->tokens.data() + static_cast<size_t>(t) * d, d,
                    tape.x0.data() + static_cast<size_t>(t) * d);
    // shared proprio projection
    tape.sp.assign(static_cast<size_t>(d), 0.0);
    matvec(th + L.find("saf.wp").offset, th + L.find("saf.bp").offset, tape.proprio.data(),
           tape.sp.data(), d, cfg.proprio_dim);
    std::copy_n(tape.sp.data(), d, tape.x0.data() + static_cast<size_t>(tape.n_ctx) * d);
    // grounded action tokens: W_fuse [W_a a_k + b_a ; W_p p + b_p] + b_fuse + pos_k
    tape.sa.assign(static_cast<size_t>(tape.n_valid) * d, 0.0);
    std::vector<double> concat(static_cast<size_t>(2 * d));
    std::copy_n(tape.sp.data(), d, concat.data() + d);
    const double* pos = th + L.find("pos").offset;
    for (int k = 0; k < tape.n_valid; ++k) {
        double* sa_k = tape.sa.data() + static_cast<size_t>(k) * d;
        matvec(th + L.find("saf.wa").offset, th + L.find("saf.ba").offset,
               tape.actions.data() + static_cast<size_t>(k) * d_a, sa_k, d, d_a);
        std::copy_n(sa_k, d, concat.data());
        double* dst = tape.x0.data() + static_cast<size_t>(tape.n_ctx + 1 + k) * d;
        matvec(th + L.find("saf.wfuse").offset, th + L.find("saf.bfuse").offset, concat.data(), dst,
               d, 2 * d);
        for (int j = 0; j < d; ++j) dst[j] += pos[static_cast<size_t>(k) * d + j];
    }
    // value token
    std::copy_n(th + L.find("value_token").offset, d,
                tape.x0.data() + static_cast<size_t>(n - 1) * d);

    // transformer blocks (pre-LN)
    tape.layers.assign(static_cast<size_t>(cfg.n_layers), {});
    std::vector<double> x = tape.x0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lt = tape.layers[static_cast<size_t>(l)];
        const std::string p = "blk" + std::to_string(l) + ".";
        lt.x_in = x;
        lt.ln1_out.assign(static_cast<size_t>(n) * d, 0.0);
        lt.ln1_xhat.assign(static_cast<size_t>(n) * d, 0.0);
        lt.ln1_rstd.assign(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < n; ++i)
            layernorm(x.data() + static_cast<size_t>(i) * d, th + L.find(p + "ln1.g").offset,
                      th + L.find(p + "ln1.b").offset, lt.ln1_out.data() + static_cast<size_t>(i) * d,
                      lt.ln1_xhat.data() + static_cast<size_t>(i) * d,
                      &lt.ln1_rstd[static_cast<size_t>(i)], d);
        lt.q.assign(static_cast<size_t>(n) * d, 0.0);
        lt.k.assign(static_cast<size_t>(n) * d, 0.0);
        lt.v.assign(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* a = lt.ln1_out.data() + static_cast<size_t>(i) * d;
            matvec(th + L.find(p + "wq").offset, th + L.find(p + "bq").offset, a,
                   lt.q.data() + static_cast<size_t>(i) * d, d, d);
            matvec(th + L.find(p + "wk").offset, th + L.find(p + "bk").offset, a,
                   lt.k.data() + static_cast<size_t>(i) * d, d, d);
            matvec(th + L.find(p + "wv").offset, th + L.find(p + "bv").offset, a,
                   lt.v.data() + static_cast<size_t>(i) * d, d, d);
        }
        lt.p.assign(static_cast<size_t>(H) * n * n, 0.0);
        lt.u.assign(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> scores(static_cast<size_t>(n));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < n; ++i) {
                const double* qi = lt.q.data() + static_cast<size_t>(i) * d + h * dh;
                double maxs = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < n; ++j) {
                    const double* kj = lt.k.data() + static_cast<size_t>(j) * d + h * dh;
                    double s = 0.0;
                    for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    scores[static_cast<size_t>(j)] = s * scale;
                    maxs = std::max(maxs, scores[static_cast<size_t>(j)]);
                }
                double z = 0.0;
                double* prow = lt.p.data() + (static_cast<size_t>(h) * n + i) * n;
                for (int j = 0; j < n; ++j) {
                    prow[j] = std::exp(scores[static_cast<size_t>(j)] - maxs);
                    z += prow[j];
                }
                for (int j = 0; j < n; ++j) prow[j] /= z;
                double* ui = lt.u.data() + static_cast<size_t>(i) * d + h * dh;
                for (int t = 0; t < dh; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += prow[j] * lt.v[static_cast<size_t>(j) * d + h * dh + t];
                    ui[t] = acc;
                }
            }
        }
        lt.x_mid.assign(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> o(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
            matvec(th + L.find(p + "wo").offset, th + L.find(p + "bo").offset,
                   lt.u.data() + static_cast<size_t>(i) * d, o.data(), d, d);
            for (int j = 0; j < d; ++j)
                lt.x_mid[static_cast<size_t>(i) * d + j] = x[static_cast<size_t>(i) * d + j] + o[static_cast<size_t>(j)];
        }
        lt.ln2_out.assign(static_cast<size_t>(n) * d, 0.0);
        lt.ln2_xhat.assign(static_cast<size_t>(n) * d, 0.0);
        lt.ln2_rstd.assign(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < n; ++i)
            layernorm(lt.x_mid.data() + static_cast<size_t>(i) * d, th + L.find(p + "ln2.g").offset,
                      th + L.find(p + "ln2.b").offset, lt.ln2_out.data() + static_cast<size_t>(i) * d,
                      lt.ln2_xhat.data() + static_cast<size_t>(i) * d,
                      &lt.ln2_rstd[static_cast<size_t>(i)], d);
        lt.ff_z.assign(static_cast<size_t>(n) * cfg.d_ff, 0.0);
        lt.ff_g.assign(static_cast<size_t>(n) * cfg.d_ff, 0.0);
        x = lt.x_mid;
        std::vector<double> f(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
            double* z = lt.ff_z.data() + static_cast<size_t>(i) * cfg.d_ff;
            matvec(th + L.find(p + "ff.w1").offset, th + L.find(p + "ff.b1").offset,
                   lt.ln2_out.data() + static_cast<size_t>(i) * d, z, cfg.d_ff, d);
            double* g = lt.ff_g.data() + static_cast<size_t>(i) * cfg.d_ff;
            for (int t = 0; t < cfg.d_ff; ++t) g[t] = gelu(z[t]);
            matvec(th + L.find(p + "ff.w2").offset, th + L.find(p + "ff.b2").offset, g, f.data(), d,
                   cfg.d_ff);
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(i) * d + j] += f[static_cast<size_t>(j)];
        }
    }
    tape.x_final = x;

    // value head on the value token
    tape.lnf_xhat.assign(static_cast<size_t>(d), 0.0);
    std::vector<double> y(static_cast<size_t>(d));
    layernorm(x.data() + static_cast<size_t>(n - 1) * d, th + L.find("lnf.g").offset,
              th + L.find("lnf.b").offset, y.data(), tape.lnf_xhat.data(), &tape.lnf_rstd, d);
    const MlpRefs refs = mlp_refs(params.layout, "vh", d, cfg.value_head);
    return mlp_stack_forward(theta, refs, y, tape.vh_z, tape.vh_a);
}

void backward_fusion_impl(const CriticParams& params, int twin, const Tape& tape, double upstream,
                          std::span<double> grad) {
    const CriticConfig& cfg = params.config;
    const ParamLayout& L = params.layout;
    const auto theta = params.twin(twin);
    const double* th = theta.data();
    double* gr = grad.data();
    const int d = cfg.d_model;
    const int d_a = cfg.action_dim;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const int n = tape.n_tok;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // value head
    const MlpRefs refs = mlp_refs(params.layout, "vh", d, cfg.value_head);
    std::vector<double> dy =
        mlp_stack_backward(theta, refs, tape.vh_z, tape.vh_a, upstream, grad);

    // final layernorm (value token only)
    std::vector<double> dx(static_cast<size_t>(n) * d, 0.0);
    layernorm_backward(dy.data(), tape.lnf_xhat.data(), tape.lnf_rstd, th + L.find("lnf.g").offset,
                       dx.data() + static_cast<size_t>(n - 1) * d, gr + L.find("lnf.g").offset,
                       gr + L.find("lnf.b").offset, d);

    // transformer blocks in reverse
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lt = tape.layers[static_cast<size_t>(l)];
        const std::string p = "blk" + std::to_string(l) + ".";

        // feed-forward: x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
        std::vector<double> dx_mid = dx;  // residual path
        std::vector<double> dln2(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dz(static_cast<size_t>(cfg.d_ff));
        std::vector<double> dg(static_cast<size_t>(cfg.d_ff), 0.0);
        for (int i = 0; i < n; ++i) {
            const double* df = dx.data() + static_cast<size_t>(i) * d;
            std::fill(dg.begin(), dg.end(), 0.0);
            matvec_backward(th + L.find(p + "ff.w2").offset,
                            lt.ff_g.data() + static_cast<size_t>(i) * cfg.d_ff, df,
                            gr + L.find(p + "ff.w2").offset, gr + L.find(p + "ff.b2").offset,
                            dg.data(), d, cfg.d_ff);
            for (int t = 0; t < cfg.d_ff; ++t) {
                double deriv;
                gelu(lt.ff_z[static_cast<size_t>(i) * cfg.d_ff + t], &deriv);
                dz[static_cast<size_t>(t)] = dg[static_cast<size_t>(t)] * deriv;
            }
            matvec_backward(th + L.find(p + "ff.w1").offset,
                            lt.ln2_out.data() + static_cast<size_t>(i) * d, dz.data(),
                            gr + L.find(p + "ff.w1").offset, gr + L.find(p + "ff.b1").offset,
                            dln2.data() + static_cast<size_t>(i) * d, cfg.d_ff, d);
        }
        for (int i = 0; i < n; ++i)
            layernorm_backward(dln2.data() + static_cast<size_t>(i) * d,
                               lt.ln2_xhat.data() + static_cast<size_t>(i) * d,
                               lt.ln2_rstd[static_cast<size_t>(i)], th + L.find(p + "ln2.g").offset,
                               dx_mid.data() + static_cast<size_t>(i) * d,
                               gr + L.find(p + "ln2.g").offset, gr + L.find(p + "ln2.b").offset, d);

        // attention: x_mid = x_in + Wo u + bo
        std::vector<double> dx_in = dx_mid;  // residual path
        std::vector<double> du(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i)
            matvec_backward(th + L.find(p + "wo").offset, lt.u.data() + static_cast<size_t>(i) * d,
                            dx_mid.data() + static_cast<size_t>(i) * d,
                            gr + L.find(p + "wo").offset, gr + L.find(p + "bo").offset,
                            du.data() + static_cast<size_t>(i) * d, d, d);

        std::vector<double> dq(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dk(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dv(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dp(static_cast<size_t>(n));
        std::vector<double> ds(static_cast<size_t>(n));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < n; ++i) {
                const double* prow = lt.p.data() + (static_cast<size_t>(h) * n + i) * n;
                const double* dui = du.data() + static_cast<size_t>(i) * d + h * dh;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double* vj = lt.v.data() + static_cast<size_t>(j) * d + h * dh;
                    double acc = 0.0;
                    for (int t = 0; t < dh; ++t) acc += dui[t] * vj[t];
                    dp[static_cast<size_t>(j)] = acc;
                    dot += acc * prow[j];
                    double* dvj = dv.data() + static_cast<size_t>(j) * d + h * dh;
                    for (int t = 0; t < dh; ++t) dvj[t] += prow[j] * dui[t];
                }
                for (int j = 0; j < n; ++j)
                    ds[static_cast<size_t>(j)] = prow[j] * (dp[static_cast<size_t>(j)] - dot);
                double* dqi = dq.data() + static_cast<size_t>(i) * d + h * dh;
                const double* qi = lt.q.data() + static_cast<size_t>(i) * d + h * dh;
                for (int j = 0; j < n; ++j) {
                    const double s = ds[static_cast<size_t>(j)] * scale;
                    const double* kj = lt.k.data() + static_cast<size_t>(j) * d + h * dh;
                    double* dkj = dk.data() + static_cast<size_t>(j) * d + h * dh;
                    for (int t = 0; t < dh; ++t) {
                        dqi[t] += s * kj[t];
                        dkj[t] += s * qi[t];
                    }
                }
            }
        }
        std::vector<double> dln1(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* a = lt.ln1_out.data() + static_cast<size_t>(i) * d;
            double* da = dln1.data() + static_cast<size_t>(i) * d;
            matvec_backward(th + L.find(p + "wq").offset, a, dq.data() + static_cast<size_t>(i) * d,
                            gr + L.find(p + "wq").offset, gr + L.find(p + "bq").offset, da, d, d);
            matvec_backward(th + L.find(p + "wk").offset, a, dk.data() + static_cast<size_t>(i) * d,
                            gr + L.find(p + "wk").offset, gr + L.find(p + "bk").offset, da, d, d);
            matvec_backward(th + L.find(p + "wv").offset, a, dv.data() + static_cast<size_t>(i) * d,
                            gr + L.find(p + "wv").offset, gr + L.find(p + "bv").offset, da, d, d);
        }
        for (int i = 0; i < n; ++i)
            layernorm_backward(dln1.data() + static_cast<size_t>(i) * d,
                               lt.ln1_xhat.data() + static_cast<size_t>(i) * d,
                               lt.ln1_rstd[static_cast<size_t>(i)], th + L.find(p + "ln1.g").offset,
                               dx_in.data() + static_cast<size_t>(i) * d,
                               gr + L.find(p + "ln1.g").offset, gr + L.find(p + "ln1.b").offset, d);
        dx = std::move(dx_in);
    }

    // token constructors
    // value token
    {
        double* dvt = gr + L.find("value_token").offset;
        const double* src = dx.data() + static_cast<size_t>(n - 1) * d;
        for (int j = 0; j < d; ++j) dvt[j] += src[j];
    }
    // action tokens: dst = Wfuse [sa_k ; sp] + bfuse + pos_k
    std::vector<double> dsp(static_cast<size_t>(d), 0.0);
    std::vector<double> concat(static_cast<size_t>(2 * d));
    std::vector<double> dconcat(static_cast<size_t>(2 * d), 0.0);
    std::copy_n(tape.sp.data(), d, concat.data() + d);
    for (int k = 0; k < tape.n_valid; ++k) {
        const double* dtok = dx.data() + static_cast<size_t>(tape.n_ctx + 1 + k) * d;
        double* dpos = gr + L.find("pos").offset + static_cast<size_t>(k) * d;
        for (int j = 0; j < d; ++j) dpos[j] += dtok[j];
        std::copy_n(tape.sa.data() + static_cast<size_t>(k) * d, d, concat.data());
        std::fill(dconcat.begin(), dconcat.end(), 0.0);
        matvec_backward(th + L.find("saf.wfuse").offset, concat.data(), dtok,
                        gr + L.find("saf.wfuse").offset, gr + L.find("saf.bfuse").offset,
                        dconcat.data(), d, 2 * d);
        // first half -> W_a path, second half -> shared proprio projection
        matvec_backward(th + L.find("saf.wa").offset,
                        tape.actions.data() + static_cast<size_t>(k) * d_a, dconcat.data(),
                        gr + L.find("saf.wa").offset, gr + L.find("saf.ba").offset, nullptr, d, d_a);
        for (int j = 0; j < d; ++j) dsp[static_cast<size_t>(j)] += dconcat[static_cast<size_t>(d + j)];
    }
    // proprio token (plus accumulated SAF uses of sp)
    {
        const double* dtok = dx.data() + static_cast<size_t>(tape.n_ctx) * d;
        for (int j = 0; j < d; ++j) dsp[static_cast<size_t>(j)] += dtok[j];
        matvec_backward(th + L.find("saf.wp").offset, tape.proprio.data(), dsp.data(),
                        gr + L.find("saf.wp").offset, gr + L.find("saf.bp").offset, nullptr, d,
                        cfg.proprio_dim);
    }
    // context tokens are fixed inputs: no parameters
}

}  // namespace

double forward_cached(const CriticParams& params, int twin, const CriticInput& input, Tape& tape) {
    check_input(params, input);
    if (twin != 0 && twin != 1) throw std::invalid_argument("critic: twin must be 0 or 1");
    return params.config.variant == Variant::Mlp ? forward_mlp_impl(params, twin, input, tape)
                                                 : forward_fusion_impl(params, twin, input, tape);
}

double forward(const CriticParams& params, int twin, const CriticInput& input) {
    TapeHandle tape;
    return forward_cached(params, twin, input, *tape.t);
}

void backward(const CriticParams& params, int twin, const Tape& tape, double upstream,
              std::span<double> grad) {
    if (grad.size() != params.twin_stride())
        throw std::invalid_argument("backward: grad size must equal twin_stride");
    if (tape.variant != params.config.variant)
        throw std::invalid_argument("backward: tape/config variant mismatch");
    if (params.config.variant == Variant::Mlp)
        backward_mlp_impl(params, twin, tape, upstream, grad);
    else
        backward_fusion_impl(params, twin, tape, upstream, grad);
}

void forward_batch(const CriticParams& params, int twin, std::span<const CriticInput> inputs,
                   std::span<double> out, ExecMode mode) {
    if (inputs.size() != out.size()) throw std::invalid_argument("forward_batch: size mismatch");
    for_each_index(static_cast<int>(inputs.size()), mode, [&](int i) {
        out[static_cast<size_t>(i)] = forward(params, twin, inputs[static_cast<size_t>(i)]);
    });
}

void forward_batch_reference(const CriticParams& params, int twin,
                             std::span<const CriticInput> inputs, std::span<double> out) {
    if (inputs.size() != out.size()) throw std::invalid_argument("forward_batch: size mismatch");
    for (size_t i = 0; i < inputs.size(); ++i) out[i] = forward(params, twin, inputs[i]);
}

namespace {
constexpr int kGradBlock = 32;
}

void accumulate_gradients(const CriticParams& params, std::span<const GradWorkItem> items,
                          std::span<double> grad, ExecMode mode) {
    const size_t stride = params.twin_stride();
    if (grad.size() != 2 * stride)
        throw std::invalid_argument("accumulate_gradients: grad size must be 2 * twin_stride");
    const int block = std::min<int>(kGradBlock, static_cast<int>(items.size()));
    std::vector<std::vector<double>> slabs(static_cast<size_t>(block));
    for (size_t base = 0; base < items.size(); base += static_cast<size_t>(kGradBlock)) {
        const int nb = static_cast<int>(std::min<size_t>(kGradBlock, items.size() - base));
        for_each_index(nb, mode, [&](int i) {
            auto& slab = slabs[static_cast<size_t>(i)];
            slab.assign(stride, 0.0);
            const GradWorkItem& item = items[base + static_cast<size_t>(i)];
            TapeHandle tape;
            forward_cached(params, item.twin, item.input, *tape.t);
            backward(params, item.twin, *tape.t, item.upstream, slab);
        });
        // serial reduction in item order keeps results independent of thread count
        for (int i = 0; i < nb; ++i) {
            const GradWorkItem& item = items[base + static_cast<size_t>(i)];
            double* dst = grad.data() + static_cast<size_t>(item.twin) * stride;
            const auto& slab = slabs[static_cast<size_t>(i)];
            for (size_t j = 0; j < stride; ++j) dst[j] += slab[j];
        }
    }
}

void accumulate_gradients_reference(const CriticParams& params,
                                    std::span<const GradWorkItem> items, std::span<double> grad) {
    const size_t stride = params.twin_stride();
    if (grad.size() != 2 * stride)
        throw std::invalid_argument("accumulate_gradients: grad size must be 2 * twin_stride");
    std::vector<double> slab;
    for (const GradWorkItem& item : items) {
        slab.assign(stride, 0.0);
        TapeHandle tape;
        forward_cached(params, item.twin, item.input, *tape.t);
        backward(params, item.twin, *tape.t, item.upstream, slab);
        double* dst = grad.data() + static_cast<size_t>(item.twin) * stride;
        for (size_t j = 0; j < stride; ++j) dst[j] += slab[j];
    }
}

double finite_diff_check(const CriticParams& params, int twin, const CriticInput& input,
                         double fd_step, int n_coords, Rng& rng) {
    if (!(fd_step > 0.0)) throw std::invalid_argument("finite_diff_check: fd_step must be > 0");
    std::vector<double> analytic(params.twin_stride(), 0.0);
    {
        TapeHandle tape;
        forward_cached(params, twin, input, *tape.t);
        backward(params, twin, *tape.t, 1.0, analytic);
    }
    const size_t total = params.twin_stride();
    const size_t want = std::min<size_t>(static_cast<size_t>(n_coords), total);
    std::unordered_set<size_t> picked;
    while (picked.size() < want) picked.insert(rng.integer(total));

    CriticParams work = params;
    const size_t base = static_cast<size_t>(twin) * total;
    double max_rel = 0.0;
    for (size_t idx : picked) {
        const double saved = work.values[base + idx];
        work.values[base + idx] = saved + fd_step;
        const double f_plus = forward(work, twin, input);
        work.values[base + idx] = saved - fd_step;
        const double f_minus = forward(work, twin, input);
        work.values[base + idx] = saved;
        const double fd = (f_plus - f_minus) / (2.0 * fd_step);
        const double an = analytic[idx];
        const double denom = std::max(std::abs(fd) + std::abs(an), 1e-6);
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

uint64_t params_checksum(const CriticParams& params) {
    return io::fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(params.values.data()),
        params.values.size() * sizeof(double)));
}

void save_params(const CriticParams& params, const std::string& path) {
    nlohmann::json header;
    header["config"] = critic_config_to_json(params.config);
    header["twin_stride"] = params.layout.total;
    header["count"] = params.values.size();
    header["checksum"] = io::hex64(params_checksum(params));
    header["tool_version"] = io::kToolVersion;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : params.layout.tensors)
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    header["tensors"] = tensors;

    std::string out = "CQPARAMS\n" + header.dump() + "\n";
    const size_t payload_off = out.size();
    out.resize(payload_off + params.values.size() * sizeof(double));
    std::memcpy(out.data() + payload_off, params.values.data(),
                params.values.size() * sizeof(double));
    io::write_file(path, out);
}

CriticParams load_params(const std::string& path) {
    const std::string data = io::read_file(path);
    const size_t magic_end = data.find('\n');
    if (magic_end == std::string::npos || data.substr(0, magic_end) != "CQPARAMS")
        throw std::runtime_error("load_params: bad magic in " + path);
    const size_t header_end = data.find('\n', magic_end + 1);
    if (header_end == std::string::npos) throw std::runtime_error("load_params: truncated header");
    const nlohmann::json header = nlohmann::json::parse(data.substr(magic_end + 1, header_end - magic_end - 1));

    CriticParams params;
    params.config = critic_config_from_json(header.at("config"));
    params.layout = build_layout(params.config);
    const size_t count = header.at("count").get<size_t>();
    if (count != 2 * params.layout.total)
        throw std::runtime_error("load_params: parameter count does not match config");
    if (data.size() - header_end - 1 != count * sizeof(double))
        throw std::runtime_error("load_params: payload size mismatch");
    params.values.resize(count);
    std::memcpy(params.values.data(), data.data() + header_end + 1, count * sizeof(double));
    if (io::hex64(params_checksum(params)) != header.at("checksum").get<std::string>())
        throw std::runtime_error("load_params: checksum mismatch");
    return params;
}

}  // namespace chunkq::critic
