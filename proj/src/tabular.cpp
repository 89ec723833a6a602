#include "chunkq/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

namespace chunkq::tabular {

int TabularSMDP::total_pairs() const {
    int n = 0;
    for (int s = 0; s < n_states; ++s) n += n_candidates(s);
    return n;
}

double TabularSMDP::reward_max() const {
    double r = 0.0;
    for (const auto& row : reward)
        for (double v : row) r = std::max(r, std::abs(v));
    return r;
}

void TabularSMDP::validate() const {
    if (n_states < 1) throw std::invalid_argument("TabularSMDP: need at least one state");
    if (!(gamma_h > 0.0 && gamma_h < 1.0))
        throw std::invalid_argument("TabularSMDP: gamma_h must be in (0,1)");
    if (static_cast<int>(reward.size()) != n_states || static_cast<int>(kernel.size()) != n_states)
        throw std::invalid_argument("TabularSMDP: table sizes must equal n_states");
    for (int s = 0; s < n_states; ++s) {
        const int k = n_candidates(s);
        if (k < 1) throw std::invalid_argument("TabularSMDP: state with no candidates");
        if (static_cast<int>(kernel[static_cast<size_t>(s)].size()) != k)
            throw std::invalid_argument("TabularSMDP: kernel/reward candidate mismatch");
        for (int c = 0; c < k; ++c) {
            if (!std::isfinite(reward[static_cast<size_t>(s)][static_cast<size_t>(c)]))
                throw std::invalid_argument("TabularSMDP: non-finite reward");
            const auto& row = kernel[static_cast<size_t>(s)][static_cast<size_t>(c)];
            if (static_cast<int>(row.size()) != n_states)
                throw std::invalid_argument("TabularSMDP: kernel row length mismatch");
            double sum = 0.0;
            for (double p : row) {
                if (p < 0.0) throw std::invalid_argument("TabularSMDP: negative kernel entry");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-12)
                throw std::invalid_argument("TabularSMDP: kernel row does not sum to 1");
        }
    }
}

void TabularProposal::validate(const TabularSMDP& smdp) const {
    if (static_cast<int>(probs.size()) != smdp.n_states)
        throw std::invalid_argument("TabularProposal: row count must equal n_states");
    for (int s = 0; s < smdp.n_states; ++s) {
        const auto& row = probs[static_cast<size_t>(s)];
        if (static_cast<int>(row.size()) != smdp.n_candidates(s))
            throw std::invalid_argument("TabularProposal: row length mismatch");
        double sum = 0.0;
        bool any = false;
        for (double p : row) {
            if (p < 0.0) throw std::invalid_argument("TabularProposal: negative probability");
            any |= p > 0.0;
            sum += p;
        }
        if (!any || std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("TabularProposal: row must sum to 1 with some support");
    }
}

QTable QTable::zeros(const TabularSMDP& smdp) {
    QTable q;
    q.q.resize(static_cast<size_t>(smdp.n_states));
    for (int s = 0; s < smdp.n_states; ++s)
        q.q[static_cast<size_t>(s)].assign(static_cast<size_t>(smdp.n_candidates(s)), 0.0);
    return q;
}

double QTable::sup_norm() const {
    double m = 0.0;
    for (const auto& row : q)
        for (double v : row) m = std::max(m, std::abs(v));
    return m;
}

double QTable::sup_diff(const QTable& other) const {
    double m = 0.0;
    for (size_t s = 0; s < q.size(); ++s)
        for (size_t c = 0; c < q[s].size(); ++c)
            m = std::max(m, std::abs(q[s][c] - other.q[s][c]));
    return m;
}

namespace {

struct ValueGroups {
    // candidate indices sorted by ascending value, grouped by exact equality
    std::vector<std::vector<int>> groups;
    std::vector<double> group_value;
    std::vector<double> group_mass;  // total sampling probability of the group
};

ValueGroups group_by_value(std::span<const double> values, std::span<const double> probs) {
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return values[static_cast<size_t>(a)] < values[static_cast<size_t>(b)];
    });
    ValueGroups g;
    for (int idx : order) {
        const double v = values[static_cast<size_t>(idx)];
        if (g.groups.empty() || g.group_value.back() != v) {
            g.groups.emplace_back();
            g.group_value.push_back(v);
            g.group_mass.push_back(0.0);
        }
        g.groups.back().push_back(idx);
        g.group_mass.back() += probs[static_cast<size_t>(idx)];
    }
    return g;
}

void check_distribution(std::span<const double> values, std::span<const double> probs, int N) {
    if (values.empty() || values.size() != probs.size())
        throw std::invalid_argument("expected_max: values/probs size mismatch");
    if (N < 1) throw std::invalid_argument("expected_max: N must be >= 1");
    double sum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] < 0.0) throw std::invalid_argument("expected_max: negative probability");
        if (!std::isfinite(values[i])) throw std::invalid_argument("expected_max: non-finite value");
        sum += probs[i];
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("expected_max: probabilities must sum to 1");
}

}  // namespace

double expected_max_exact(std::span<const double> values, std::span<const double> probs, int N) {
    check_distribution(values, probs, N);
    const ValueGroups g = group_by_value(values, probs);
    double expectation = 0.0;
    double cum_prev_pow = 0.0;  // F_{g-1}^N
    double cum = 0.0;
    for (size_t i = 0; i < g.groups.size(); ++i) {
        cum += g.group_mass[i];
        const double cum_pow = std::pow(std::min(cum, 1.0), N);
        expectation += g.group_value[i] * (cum_pow - cum_prev_pow);
        cum_prev_pow = cum_pow;
    }
    return expectation;
}

std::vector<double> selection_distribution(std::span<const double> values,
                                           std::span<const double> probs, int N) {
    check_distribution(values, probs, N);
    const ValueGroups g = group_by_value(values, probs);
    std::vector<double> sel(values.size(), 0.0);
    double cum_prev_pow = 0.0;
    double cum = 0.0;
    for (size_t i = 0; i < g.groups.size(); ++i) {
        cum += g.group_mass[i];
        const double cum_pow = std::pow(std::min(cum, 1.0), N);
        const double group_event = cum_pow - cum_prev_pow;  // group holds the max
        cum_prev_pow = cum_pow;
        if (g.group_mass[i] <= 0.0) continue;
        // within a tied group the earliest drawn sample wins, so the mass
        // splits proportionally to sampling probabilities
        for (int idx : g.groups[i])
            sel[static_cast<size_t>(idx)] =
                group_event * probs[static_cast<size_t>(idx)] / g.group_mass[i];
    }
    return sel;
}

QTable apply_operator(const TabularSMDP& smdp, const TabularProposal& proposal, const QTable& q,
                      int N) {
    if (static_cast<int>(q.q.size()) != smdp.n_states)
        throw std::invalid_argument("apply_operator: QTable shape mismatch");
    // one expected-max per next state, shared across all (s, cand) backups
    std::vector<double> emax(static_cast<size_t>(smdp.n_states));
    for (int s = 0; s < smdp.n_states; ++s) {
        if (static_cast<int>(q.q[static_cast<size_t>(s)].size()) != smdp.n_candidates(s))
            throw std::invalid_argument("apply_operator: QTable row mismatch");
        emax[static_cast<size_t>(s)] =
            expected_max_exact(q.q[static_cast<size_t>(s)], proposal.probs[static_cast<size_t>(s)], N);
    }
    QTable out = QTable::zeros(smdp);
    for (int s = 0; s < smdp.n_states; ++s)
        for (int c = 0; c < smdp.n_candidates(s); ++c) {
            double bootstrap = 0.0;
            const auto& row = smdp.kernel[static_cast<size_t>(s)][static_cast<size_t>(c)];
            for (int s2 = 0; s2 < smdp.n_states; ++s2)
                bootstrap += row[static_cast<size_t>(s2)] * emax[static_cast<size_t>(s2)];
            out.q[static_cast<size_t>(s)][static_cast<size_t>(c)] =
                smdp.reward[static_cast<size_t>(s)][static_cast<size_t>(c)] + smdp.gamma_h * bootstrap;
        }
    return out;
}

FixedPointResult solve_fixed_point(const TabularSMDP& smdp, const TabularProposal& proposal, int N,
                                   double tol, int max_iter) {
    if (!(tol > 0.0)) throw std::invalid_argument("solve_fixed_point: tol must be > 0");
    smdp.validate();
    proposal.validate(smdp);
    FixedPointResult result;
    result.q = QTable::zeros(smdp);
    for (int it = 0; it < max_iter; ++it) {
        QTable next = apply_operator(smdp, proposal, result.q, N);
        const double delta = next.sup_diff(result.q);
        result.report.deltas.push_back(delta);
        result.q = std::move(next);
        ++result.report.iterations;
        if (delta <= tol) {
            result.report.converged = true;
            return result;
        }
    }
    throw std::runtime_error("solve_fixed_point: max_iter reached, last delta = " +
                             std::to_string(result.report.deltas.back()));
}

namespace {

QTable policy_evaluation(const TabularSMDP& smdp,
                         const std::vector<std::vector<double>>& sel, double tol) {
    // Q^pi(s,c) = R(s,c) + gamma_h * sum_s' P(s'|s,c) sum_i sel_i(s') Q^pi(s',i)
    const int n = smdp.total_pairs();
    std::vector<int> offset(static_cast<size_t>(smdp.n_states), 0);
    for (int s = 1; s < smdp.n_states; ++s)
        offset[static_cast<size_t>(s)] = offset[static_cast<size_t>(s - 1)] + smdp.n_candidates(s - 1);

    if (n <= 200) {
        Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd b(n);
        for (int s = 0; s < smdp.n_states; ++s)
            for (int c = 0; c < smdp.n_candidates(s); ++c) {
                const int row = offset[static_cast<size_t>(s)] + c;
                b(row) = smdp.reward[static_cast<size_t>(s)][static_cast<size_t>(c)];
                const auto& krow = smdp.kernel[static_cast<size_t>(s)][static_cast<size_t>(c)];
                for (int s2 = 0; s2 < smdp.n_states; ++s2) {
                    if (krow[static_cast<size_t>(s2)] == 0.0) continue;
                    for (int i = 0; i < smdp.n_candidates(s2); ++i)
                        A(row, offset[static_cast<size_t>(s2)] + i) -=
                            smdp.gamma_h * krow[static_cast<size_t>(s2)] *
                            sel[static_cast<size_t>(s2)][static_cast<size_t>(i)];
                }
            }
        const Eigen::VectorXd x = A.partialPivLu().solve(b);
        QTable q = QTable::zeros(smdp);
        for (int s = 0; s < smdp.n_states; ++s)
            for (int c = 0; c < smdp.n_candidates(s); ++c)
                q.q[static_cast<size_t>(s)][static_cast<size_t>(c)] =
                    x(offset[static_cast<size_t>(s)] + c);
        return q;
    }

    QTable q = QTable::zeros(smdp);
    for (int it = 0; it < 1000000; ++it) {
        std::vector<double> v(static_cast<size_t>(smdp.n_states), 0.0);
        for (int s = 0; s < smdp.n_states; ++s)
            for (int i = 0; i < smdp.n_candidates(s); ++i)
                v[static_cast<size_t>(s)] += sel[static_cast<size_t>(s)][static_cast<size_t>(i)] *
                                             q.q[static_cast<size_t>(s)][static_cast<size_t>(i)];
        QTable next = QTable::zeros(smdp);
        double delta = 0.0;
        for (int s = 0; s < smdp.n_states; ++s)
            for (int c = 0; c < smdp.n_candidates(s); ++c) {
                double bootstrap = 0.0;
                const auto& krow = smdp.kernel[static_cast<size_t>(s)][static_cast<size_t>(c)];
                for (int s2 = 0; s2 < smdp.n_states; ++s2)
                    bootstrap += krow[static_cast<size_t>(s2)] * v[static_cast<size_t>(s2)];
                const double val =
                    smdp.reward[static_cast<size_t>(s)][static_cast<size_t>(c)] + smdp.gamma_h * bootstrap;
                delta = std::max(delta,
                                 std::abs(val - q.q[static_cast<size_t>(s)][static_cast<size_t>(c)]));
                next.q[static_cast<size_t>(s)][static_cast<size_t>(c)] = val;
            }
        q = std::move(next);
        if (delta <= tol) return q;
    }
    throw std::runtime_error("policy_evaluation: did not converge");
}

}  // namespace

QTable evaluate_induced_policy(const TabularSMDP& smdp, const TabularProposal& proposal,
                               const QTable& q, int N, double tol) {
    smdp.validate();
    proposal.validate(smdp);
    std::vector<std::vector<double>> sel(static_cast<size_t>(smdp.n_states));
    for (int s = 0; s < smdp.n_states; ++s)
        sel[static_cast<size_t>(s)] = selection_distribution(
            q.q[static_cast<size_t>(s)], proposal.probs[static_cast<size_t>(s)], N);
    return policy_evaluation(smdp, sel, tol);
}

QTable support_optimal_q(const TabularSMDP& smdp, const TabularProposal& proposal, double tol,
                         int max_iter) {
    smdp.validate();
    proposal.validate(smdp);
    QTable q = QTable::zeros(smdp);
    for (int it = 0; it < max_iter; ++it) {
        std::vector<double> v(static_cast<size_t>(smdp.n_states));
        for (int s = 0; s < smdp.n_states; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < smdp.n_candidates(s); ++i)
                if (proposal.probs[static_cast<size_t>(s)][static_cast<size_t>(i)] > 0.0)
                    best = std::max(best, q.q[static_cast<size_t>(s)][static_cast<size_t>(i)]);
            v[static_cast<size_t>(s)] = best;
        }
        QTable next = QTable::zeros(smdp);
        double delta = 0.0;
        for (int s = 0; s < smdp.n_states; ++s)
            for (int c = 0; c < smdp.n_candidates(s); ++c) {
                double bootstrap = 0.0;
                const auto& krow = smdp.kernel[static_cast<size_t>(s)][static_cast<size_t>(c)];
                for (int s2 = 0; s2 < smdp.n_states; ++s2)
                    bootstrap += krow[static_cast<size_t>(s2)] * v[static_cast<size_t>(s2)];
                const double val =
                    smdp.reward[static_cast<size_t>(s)][static_cast<size_t>(c)] + smdp.gamma_h * bootstrap;
                delta = std::max(delta,
                                 std::abs(val - q.q[static_cast<size_t>(s)][static_cast<size_t>(c)]));
                next.q[static_cast<size_t>(s)][static_cast<size_t>(c)] = val;
            }
        q = std::move(next);
        if (delta <= tol) return q;
    }
    throw std::runtime_error("support_optimal_q: did not converge");
}

namespace {

QTable random_qtable(const TabularSMDP& smdp, Rng& rng, double scale) {
    QTable q = QTable::zeros(smdp);
    for (auto& row : q.q)
        for (double& v : row) v = rng.uniform(-scale, scale);
    return q;
}

}  // namespace

ContractionReport verify_contraction(const TabularSMDP& smdp, const TabularProposal& proposal,
                                     int N, int trials, Rng& rng) {
    smdp.validate();
    proposal.validate(smdp);
    ContractionReport report;
    report.trials = trials;
    for (int t = 0; t < trials; ++t) {
        const QTable q1 = random_qtable(smdp, rng, 3.0);
        const QTable q2 = random_qtable(smdp, rng, 3.0);
        const double denom = q1.sup_diff(q2);
        if (denom == 0.0) continue;
        const QTable t1 = apply_operator(smdp, proposal, q1, N);
        const QTable t2 = apply_operator(smdp, proposal, q2, N);
        report.max_ratio = std::max(report.max_ratio, t1.sup_diff(t2) / denom);
    }
    report.pass = report.max_ratio <= smdp.gamma_h + 1e-12;
    return report;
}

MonotonicityReport verify_monotonicity(const TabularSMDP& smdp, const TabularProposal& proposal,
                                       std::span<const int> Ns, double tol) {
    MonotonicityReport report;
    report.Ns.assign(Ns.begin(), Ns.end());
    std::sort(report.Ns.begin(), report.Ns.end());
    report.min_slack = std::numeric_limits<double>::infinity();
    QTable prev;
    for (size_t i = 0; i < report.Ns.size(); ++i) {
        QTable cur = solve_fixed_point(smdp, proposal, report.Ns[i], tol).q;
        if (i > 0) {
            for (int s = 0; s < smdp.n_states; ++s)
                for (int c = 0; c < smdp.n_candidates(s); ++c) {
                    if (proposal.probs[static_cast<size_t>(s)][static_cast<size_t>(c)] <= 0.0)
                        continue;  // monotonicity is claimed on support only
                    report.min_slack = std::min(
                        report.min_slack, cur.q[static_cast<size_t>(s)][static_cast<size_t>(c)] -
                                              prev.q[static_cast<size_t>(s)][static_cast<size_t>(c)]);
                }
        }
        prev = std::move(cur);
    }
    if (report.Ns.size() < 2) report.min_slack = 0.0;  // vacuous
    report.pass = report.min_slack >= -1e-10;
    return report;
}

LimitReport verify_limit(const TabularSMDP& smdp, const TabularProposal& proposal, int N_max,
                         double threshold, double tol) {
    if (N_max < 1) throw std::invalid_argument("verify_limit: N_max must be >= 1");
    LimitReport report;
    const QTable q_star = support_optimal_q(smdp, proposal, tol);
    for (int N = 1; N <= N_max; N *= 2) {
        report.Ns.push_back(N);
        report.gaps.push_back(solve_fixed_point(smdp, proposal, N, tol).q.sup_diff(q_star));
    }
    report.non_increasing = true;
    for (size_t i = 1; i < report.gaps.size(); ++i)
        report.non_increasing &= report.gaps[i] <= report.gaps[i - 1] + 1e-12;
    report.final_gap = report.gaps.back();
    report.pass = report.non_increasing && report.final_gap <= threshold;
    return report;
}

BoundednessReport verify_boundedness(const TabularSMDP& smdp, const TabularProposal& proposal,
                                     int N, int trials, Rng& rng) {
    smdp.validate();
    proposal.validate(smdp);
    BoundednessReport report;
    report.trials = trials;
    const double r_max = smdp.reward_max();
    report.max_excess = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < trials; ++t) {
        const QTable q = random_qtable(smdp, rng, 5.0);
        const QTable tq = apply_operator(smdp, proposal, q, N);
        report.max_excess =
            std::max(report.max_excess, tq.sup_norm() - (r_max + smdp.gamma_h * q.sup_norm()));
    }
    report.pass = report.max_excess <= 1e-12;
    return report;
}

nlohmann::json smdp_to_json(const TabularSMDP& smdp) {
    nlohmann::json j;
    j["states"] = smdp.n_states;
    j["gamma_h"] = smdp.gamma_h;
    j["reward"] = smdp.reward;
    j["kernel"] = smdp.kernel;
    return j;
}

TabularSMDP smdp_from_json(const nlohmann::json& j) {
    TabularSMDP smdp;
    smdp.n_states = j.at("states").get<int>();
    smdp.gamma_h = j.at("gamma_h").get<double>();
    smdp.reward = j.at("reward").get<std::vector<std::vector<double>>>();
    smdp.kernel = j.at("kernel").get<std::vector<std::vector<std::vector<double>>>>();
    smdp.validate();
    return smdp;
}

nlohmann::json proposal_to_json(const TabularProposal& proposal) {
    return nlohmann::json{{"probs", proposal.probs}};
}

TabularProposal proposal_from_json(const nlohmann::json& j) {
    TabularProposal p;
    p.probs = j.at("probs").get<std::vector<std::vector<double>>>();
    return p;
}

std::vector<Fixture> fixture_suite() {
    std::vector<Fixture> fixtures;

    {
        // One state, two candidates (rewards 0 and 1), self-loop, gamma_h 0.5.
        // Closed forms: N=1 -> (0.5, 1.5), N=2 -> (0.75, 1.75), N->inf -> (1, 2).
        Fixture f;
        f.name = "one-state";
        f.smdp.n_states = 1;
        f.smdp.gamma_h = 0.5;
        f.smdp.reward = {{0.0, 1.0}};
        f.smdp.kernel = {{{1.0}, {1.0}}};
        f.proposal.probs = {{0.5, 0.5}};
        fixtures.push_back(std::move(f));
    }
    {
        // Two-state chain with asymmetric candidates and gamma_h 0.9.
        Fixture f;
        f.name = "two-state-chain";
        f.smdp.n_states = 2;
        f.smdp.gamma_h = 0.9;
        f.smdp.reward = {{0.2, -0.4, 1.0}, {0.5, -1.0}};
        f.smdp.kernel = {{{0.8, 0.2}, {0.5, 0.5}, {0.1, 0.9}}, {{1.0, 0.0}, {0.3, 0.7}}};
        f.proposal.probs = {{0.5, 0.25, 0.25}, {0.6, 0.4}};
        fixtures.push_back(std::move(f));
    }
    {
        // Four-state ring, gamma_h 0.98 (slow mixing, exercises iteration budgets).
        Fixture f;
        f.name = "ring-4";
        f.smdp.n_states = 4;
        f.smdp.gamma_h = 0.98;
        f.smdp.reward.resize(4);
        f.smdp.kernel.resize(4);
        f.proposal.probs.resize(4);
        for (int s = 0; s < 4; ++s) {
            f.smdp.reward[static_cast<size_t>(s)] = {0.1 * s, -0.2 + 0.15 * s};
            std::vector<double> advance(4, 0.0), stay(4, 0.0);
            advance[static_cast<size_t>((s + 1) % 4)] = 0.9;
            advance[static_cast<size_t>(s)] = 0.1;
            stay[static_cast<size_t>(s)] = 0.7;
            stay[static_cast<size_t>((s + 3) % 4)] = 0.3;
            f.smdp.kernel[static_cast<size_t>(s)] = {advance, stay};
            f.proposal.probs[static_cast<size_t>(s)] = {0.7, 0.3};
        }
        fixtures.push_back(std::move(f));
    }
    {
        // Candidate with zero proposal probability: exercises the support
        // restriction in the monotonicity and limit checks.
        Fixture f;
        f.name = "zero-support";
        f.smdp.n_states = 2;
        f.smdp.gamma_h = 0.5;
        f.smdp.reward = {{0.0, 1.0, 5.0}, {0.3}};
        f.smdp.kernel = {{{0.5, 0.5}, {0.5, 0.5}, {0.0, 1.0}}, {{0.5, 0.5}}};
        f.proposal.probs = {{0.5, 0.5, 0.0}, {1.0}};
        fixtures.push_back(std::move(f));
    }
    for (auto& f : fixtures) {
        f.smdp.validate();
        f.proposal.validate(f.smdp);
    }
    return fixtures;
}

Fixture random_instance(int max_states, int max_candidates, double gamma_h, Rng& rng) {
    if (max_states < 1 || max_candidates < 1)
        throw std::invalid_argument("random_instance: sizes must be >= 1");
    Fixture f;
    f.name = "random";
    f.smdp.n_states = 1 + static_cast<int>(rng.integer(static_cast<uint64_t>(max_states)));
    f.smdp.gamma_h = gamma_h;
    f.smdp.reward.resize(static_cast<size_t>(f.smdp.n_states));
    f.smdp.kernel.resize(static_cast<size_t>(f.smdp.n_states));
    f.proposal.probs.resize(static_cast<size_t>(f.smdp.n_states));
    for (int s = 0; s < f.smdp.n_states; ++s) {
        const int k = 1 + static_cast<int>(rng.integer(static_cast<uint64_t>(max_candidates)));
        auto& rewards = f.smdp.reward[static_cast<size_t>(s)];
        auto& rows = f.smdp.kernel[static_cast<size_t>(s)];
        auto& probs = f.proposal.probs[static_cast<size_t>(s)];
        rewards.resize(static_cast<size_t>(k));
        rows.resize(static_cast<size_t>(k));
        probs.resize(static_cast<size_t>(k));
        for (int c = 0; c < k; ++c) {
            rewards[static_cast<size_t>(c)] = rng.uniform(-1.0, 1.0);
            auto& row = rows[static_cast<size_t>(c)];
            row.resize(static_cast<size_t>(f.smdp.n_states));
            double sum = 0.0;
            for (double& p : row) {
                p = rng.uniform(0.01, 1.0);
                sum += p;
            }
            for (double& p : row) p /= sum;
        }
        double sum = 0.0;
        for (double& p : probs) {
            p = rng.uniform(0.05, 1.0);
            sum += p;
        }
        for (double& p : probs) p /= sum;
    }
    f.smdp.validate();
    f.proposal.validate(f.smdp);
    return f;
}

int gridworld_state_key(const EnvState& state, int grid_size) {
    return static_cast<int>(state.proprio[1]) * grid_size + static_cast<int>(state.proprio[0]);
}

GridworldTabular tabular_from_gridworld(const Env& env, const FiniteProposal& proposal,
                                        double gamma, int h) {
    if (env.kind() != EnvKind::Gridworld)
        throw std::invalid_argument("tabular_from_gridworld: environment is not a gridworld");
    if (h < 1) throw std::invalid_argument("tabular_from_gridworld: h must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0))
        throw std::invalid_argument("tabular_from_gridworld: gamma must be in (0,1)");
    const int n = env.config().grid_size;
    if (proposal.n_keys() != n * n)
        throw std::invalid_argument("tabular_from_gridworld: proposal must cover every cell");

    GridworldTabular out;
    out.smdp.n_states = n * n;
    out.smdp.gamma_h = std::pow(gamma, h);
    out.goal_state = (n - 1) * n + (n - 1);
    out.smdp.reward.resize(static_cast<size_t>(n * n));
    out.smdp.kernel.resize(static_cast<size_t>(n * n));
    out.proposal.probs.resize(static_cast<size_t>(n * n));

    for (int key = 0; key < n * n; ++key) {
        const auto& sc = proposal.at_key(key);
        const int k = static_cast<int>(sc.chunks.size());
        out.proposal.probs[static_cast<size_t>(key)] = sc.probs;
        auto& rewards = out.smdp.reward[static_cast<size_t>(key)];
        auto& rows = out.smdp.kernel[static_cast<size_t>(key)];
        rewards.assign(static_cast<size_t>(k), 0.0);
        rows.assign(static_cast<size_t>(k), std::vector<double>(static_cast<size_t>(n * n), 0.0));

        if (key == out.goal_state) {
            // absorbing goal: every candidate self-loops with zero reward
            for (int c = 0; c < k; ++c) rows[static_cast<size_t>(c)][static_cast<size_t>(key)] = 1.0;
            continue;
        }

        EnvState start;
        start.proprio = {static_cast<double>(key % n), static_cast<double>(key / n)};
        start.goal = {static_cast<double>(n - 1), static_cast<double>(n - 1)};
        start.step_index = 0;

        for (int c = 0; c < k; ++c) {
            const ActionChunk& chunk = sc.chunks[static_cast<size_t>(c)];
            EnvState cur = start;
            double ret = 0.0;
            double disc = 1.0;
            bool absorbed = false;
            const int steps = std::min(h, chunk.valid_steps());
            for (int j = 0; j < steps && !absorbed; ++j) {
                const StepResult res = env.step(cur, chunk.step(j));
                ret += disc * res.reward;
                disc *= gamma;
                cur = res.next_state;
                absorbed = env.at_goal(cur);
            }
            rewards[static_cast<size_t>(c)] = ret;
            const int next_key =
                absorbed ? out.goal_state : gridworld_state_key(cur, n);
            rows[static_cast<size_t>(c)][static_cast<size_t>(next_key)] = 1.0;
        }
    }
    out.smdp.validate();
    out.proposal.validate(out.smdp);
    return out;
}

}  // namespace chunkq::tabular
