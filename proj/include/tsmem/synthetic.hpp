#pragma once

// Synthetic series generator: seasonal signal + linear trend + step-wise
// regime shifts + Gaussian noise, deterministic from the recipe seed.

#include "tsmem/core.hpp"
#include "tsmem/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tsmem {

struct RegimeShift {
  long start = 0;      // first index the offset applies to
  double offset = 0.0;
};

struct SyntheticRecipe {
  long length = 8000;
  int channels = 3;
  int period = 48;
  double amplitude = 1.0;
  double trend_slope = 0.0;
  double noise_sigma = 0.5;
  std::vector<RegimeShift> shifts = {{4000, 5.0}};
  std::uint64_t seed = 42;

  void validate() const {
    detail::require(length >= 1, "SyntheticRecipe: length must be >= 1");
    detail::require(channels >= 1, "SyntheticRecipe: channels must be >= 1");
    detail::require(period >= 1, "SyntheticRecipe: period must be >= 1");
    detail::require(noise_sigma >= 0.0, "SyntheticRecipe: sigma must be >= 0");
    for (const auto& s : shifts)
      detail::require(s.start >= 0 && s.start < length,
                      "SyntheticRecipe: shift start outside [0, T)");
  }
};

inline SeriesFrame gen_synthetic(const SyntheticRecipe& recipe) {
  recipe.validate();
  const long T = recipe.length;
  const int C = recipe.channels;
  SeriesFrame frame;
  frame.values = Matrix(T, C);
  frame.period_hint = recipe.period;
  Rng rng(recipe.seed);
  for (int c = 0; c < C; ++c) {
    frame.channel_names.push_back("ch" + std::to_string(c));
    const double phase = 2.0 * M_PI * c / static_cast<double>(C);
    for (long t = 0; t < T; ++t) {
      double v = recipe.amplitude *
                     std::sin(2.0 * M_PI * t / recipe.period + phase) +
                 recipe.trend_slope * static_cast<double>(t);
      for (const auto& s : recipe.shifts)
        if (t >= s.start) v += s.offset;
      if (recipe.noise_sigma > 0.0) v += rng.normal(0.0, recipe.noise_sigma);
      frame.values(t, c) = v;
    }
  }
  return frame;
}

}  // namespace tsmem
