#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "visrecon/errors.hpp"

namespace visrecon {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw config_error("unknown schedule kind: " + s);
}

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // T entries in (0,1)
    std::vector<double> alpha_bar;  // cumulative products of (1-beta), strictly decreasing

    double ab(int t) const {
        check(t >= 0 && t < T, "schedule step out of range");
        return alpha_bar[t];
    }

    void validate() const {
        check(T >= 2 && static_cast<int>(beta.size()) == T && static_cast<int>(alpha_bar.size()) == T,
              "schedule sizes inconsistent");
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            check(beta[t] > 0.0 && beta[t] < 1.0, "beta out of (0,1)");
            prod *= 1.0 - beta[t];
            check(std::abs(alpha_bar[t] - prod) <= 1e-12 * std::abs(prod), "alpha_bar product identity violated");
            check(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0, "alpha_bar out of (0,1]");
            if (t > 0) check(alpha_bar[t] < alpha_bar[t - 1], "alpha_bar not strictly decreasing");
        }
    }
};

inline NoiseSchedule make_schedule(int T, double beta_min, double beta_max, ScheduleKind kind) {
    if (T < 2) throw config_error("make_schedule: T must be >= 2");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw config_error("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b;
        if (kind == ScheduleKind::linear) {
            b = beta_min + (beta_max - beta_min) * (T == 1 ? 0.0 : static_cast<double>(t) / (T - 1));
        } else {
            // squared-cosine ramp between the endpoints
            double u = static_cast<double>(t) / (T - 1);
            double w = 0.5 * (1.0 - std::cos(M_PI * u));
            b = beta_min + (beta_max - beta_min) * w;
        }
        s.beta[t] = b;
        prod *= 1.0 - b;
        s.alpha_bar[t] = prod;
    }
    s.validate();
    return s;
}

}  // namespace visrecon
