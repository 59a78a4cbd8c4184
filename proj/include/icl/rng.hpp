#pragma once

#include <cstdint>
#include <random>

namespace icl {

// Named sub-streams derived from one master seed. Every consumer of
// randomness owns its own stream so runs are reproducible regardless of
// evaluation cadence or module call order.
enum class Stream : std::uint32_t {
  dictionary = 1,  // random rotation of the canonical axes (if enabled)
  model_init = 2,
  train_sampling = 3,
  test_set = 4,
  noise_probe = 5,
  attention_stat = 6,
  ood_eval = 7,
};

inline std::mt19937_64 make_stream(std::uint64_t master_seed, Stream id) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed & 0xffffffffu),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(id)};
  return std::mt19937_64(seq);
}

inline std::mt19937_64 make_stream(std::uint64_t master_seed, Stream id,
                                   std::uint32_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed & 0xffffffffu),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(id), index};
  return std::mt19937_64(seq);
}

}  // namespace icl
