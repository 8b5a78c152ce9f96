#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "spade/data/scene.hpp"

namespace spade {

// Frozen stand-in for a text encoder. Object prompts embed through the
// category's channel signature; predicate prompts embed through a fixed
// geometric descriptor of what the predicate means:
//   (dx, dy, axis_overlap, overlap_flag, near_flag, bias)
// Because the map from descriptor to embedding is shared, predicates never
// seen in training still land in a structured place — which is what lets the
// open-vocabulary path say anything nontrivial about them.
class TextEmbedder {
public:
  static constexpr std::size_t kDescriptorDim = 6;

  TextEmbedder(std::size_t d, std::size_t channels, std::size_t n_categories,
               std::uint64_t signature_seed, std::uint64_t prompt_seed)
      : d_(d), n_categories_(n_categories) {
    const Tensor sig = category_signatures(n_categories, channels, signature_seed);
    Rng r_obj(child_seed(prompt_seed, 1));
    Tensor M_o = Tensor::randn({d, channels}, r_obj, 1.0 / std::sqrt(double(channels)));
    object_embeds_ = Tensor::zeros({n_categories, d});
    for (std::size_t c = 0; c < n_categories; ++c) {
      std::vector<double> v(d, 0.0);
      double norm2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < channels; ++k) s += M_o.at(i, k) * sig.at(c, k);
        v[i] = s;
        norm2 += s * s;
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t i = 0; i < d; ++i)
        object_embeds_.mutable_data()[c * d + i] = v[i] * inv;
    }

    Rng r_pred(child_seed(prompt_seed, 2));
    Tensor M_p = Tensor::randn({d, kDescriptorDim}, r_pred,
                               1.0 / std::sqrt(double(kDescriptorDim)));
    predicate_embeds_ = Tensor::zeros({kNumPredicates, d});
    for (int p = 0; p < kNumPredicates; ++p) {
      const auto g = descriptor(p);
      std::vector<double> v(d, 0.0);
      double norm2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < kDescriptorDim; ++k) s += M_p.at(i, k) * g[k];
        v[i] = s;
        norm2 += s * s;
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t i = 0; i < d; ++i)
        predicate_embeds_.mutable_data()[static_cast<std::size_t>(p) * d + i] = v[i] * inv;
    }

    Rng r_pad(child_seed(prompt_seed, 3));
    pad_embed_ = Tensor::randn({1, d}, r_pad);
    double n2 = 0.0;
    for (double v : pad_embed_.data()) n2 += v * v;
    for (auto& v : pad_embed_.mutable_data()) v /= std::sqrt(n2);
  }

  static std::array<double, kDescriptorDim> descriptor(int predicate) {
    switch (predicate) {
      case kLeftOf:      return {-1, 0, 1, 0, 0, 1};
      case kRightOf:     return {+1, 0, 1, 0, 0, 1};
      case kAbove:       return {0, -1, 1, 0, 0, 1};
      case kBelow:       return {0, +1, 1, 0, 0, 1};
      case kOverlapping: return {0, 0, 0, 1, 0, 1};
      case kNear:        return {0, 0, 0, 0, 1, 1};
      default:
        throw VocabError("unknown predicate id " + std::to_string(predicate));
    }
  }

  std::size_t dim() const { return d_; }
  std::size_t n_categories() const { return n_categories_; }

  // [1, d] unit rows
  Tensor object_embedding(int category_id) const {
    if (category_id < 0 || static_cast<std::size_t>(category_id) >= n_categories_)
      throw VocabError("unknown object category id " + std::to_string(category_id));
    return slice(object_embeds_, 0, static_cast<std::size_t>(category_id),
                 static_cast<std::size_t>(category_id) + 1);
  }
  Tensor predicate_embedding(int predicate_id) const {
    if (predicate_id < 0 || predicate_id >= kNumPredicates)
      throw VocabError("unknown predicate id " + std::to_string(predicate_id));
    return slice(predicate_embeds_, 0, static_cast<std::size_t>(predicate_id),
                 static_cast<std::size_t>(predicate_id) + 1);
  }
  Tensor pad_embedding() const { return pad_embed_; }

  // [n_categories, d] and [n_predicates, d] banks
  const Tensor& object_bank() const { return object_embeds_; }
  const Tensor& predicate_bank() const { return predicate_embeds_; }

private:
  std::size_t d_, n_categories_;
  Tensor object_embeds_, predicate_embeds_, pad_embed_;
};

}  // namespace spade
