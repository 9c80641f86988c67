#ifndef DEFECTGEN_RNG_HPP
#define DEFECTGEN_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

#include "defectgen/tensor.hpp"

namespace defectgen {

// Stateless stream derivation: every consumer seeds its own engine from
// (seed, stream ids...). Resume-from-checkpoint reproduces trajectories
// because nothing depends on engine state carried across steps.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> stream) {
    uint64_t h = splitmix64(seed);
    for (uint64_t s : stream) h = splitmix64(h ^ splitmix64(s));
    return h;
}

inline std::mt19937_64 make_rng(uint64_t seed, std::initializer_list<uint64_t> stream = {}) {
    return std::mt19937_64(mix_seed(seed, stream));
}

// Stream ids used by the trainer/sampler so substreams never collide.
enum class Stream : uint64_t {
    init = 1,
    batch = 2,
    timestep = 3,
    noise = 4,
    boxmask = 5,
    augment = 6,
    dropout = 7,
    sampler_init = 8,
    sampler_background = 9,
    corpus = 10,
    split = 11,
    downstream = 12,
};

inline std::mt19937_64 step_rng(uint64_t seed, Stream s, uint64_t step) {
    return make_rng(seed, {static_cast<uint64_t>(s), step});
}

template <class T>
void fill_gaussian(BasicTensor<T>& t, std::mt19937_64& rng, double stddev = 1.0, double mean = 0.0) {
    std::normal_distribution<double> d(mean, stddev);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(d(rng));
}

template <class T>
void fill_uniform(BasicTensor<T>& t, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(d(rng));
}

template <class T>
BasicTensor<T> gaussian_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev = 1.0) {
    BasicTensor<T> t(std::move(shape));
    fill_gaussian(t, rng, stddev);
    return t;
}

}  // namespace defectgen

#endif
