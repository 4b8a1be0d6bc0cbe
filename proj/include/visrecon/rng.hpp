#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "visrecon/errors.hpp"

namespace visrecon {

// splitmix64 finalizer, used to hash seed components into stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic seed for a named substream, e.g. derive_seed(root, "denoiser", epoch).
inline std::uint64_t derive_seed(std::uint64_t root, const std::string& tag, std::uint64_t index = 0) {
    return mix64(root ^ mix64(hash_str(tag)) ^ mix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

// All randomness flows through this wrapper so that sampling sequences are
// reproducible across platforms (mt19937_64 plus fixed transforms, no
// libstdc++-specific distributions).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        check(n > 0, "uniform_int: n must be positive");
        std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = eng_();
        } while (v >= lim);
        return v % n;
    }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Beta(a, b) via Johnk's rejection method; fine for the small shape
    // parameters used by mixup coefficients.
    double beta(double a, double b) {
        check(a > 0.0 && b > 0.0, "beta: shape parameters must be positive");
        for (;;) {
            double u = uniform(), v = uniform();
            double x = std::pow(u, 1.0 / a);
            double y = std::pow(v, 1.0 / b);
            if (x + y <= 1.0 && x + y > 0.0) return x / (x + y);
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

    // Engine state round-trips through text so training can checkpoint and
    // resume with an identical random stream.
    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        os << " " << (have_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        int hs = 0;
        is >> hs >> spare_;
        if (is.fail()) throw data_error("rng state string is corrupt");
        have_spare_ = hs != 0;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace visrecon
