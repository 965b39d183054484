#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ppg/rng.hpp"
#include "ppg/support.hpp"
#include "ppg/tensor.hpp"

// Deterministic few-shot segmentation episodes: compact bright blobs, rings
// and thin dark branching trees on a shaded background with speckle noise.
namespace ppg {

enum class ObjectClass { blob, ring, branch };

std::string class_name(ObjectClass c);
ObjectClass parse_class(const std::string& name);

struct EpisodeSpec {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ObjectClass> classes{ObjectClass::blob, ObjectClass::ring};
  std::size_t shots = 1;
  double noise = 0.1;        // multiplicative speckle std
  double deformation = 0.5;  // support vs target instance variation in [0, 1]
  // When set, object 0 is absent from the target (its gt mask is empty).
  bool empty_object = false;

  void validate() const;
};

struct Episode {
  std::vector<ObjectClass> classes;
  Tensor target;  // [3, H0, W0]
  Tensor gt;      // [N, H0, W0]
  SupportSet support;

  std::size_t objects() const { return classes.size(); }
};

Episode generate_episode(const EpisodeSpec& spec);

// `count` episodes with seeds mix_seed(spec.seed, i). With shuffle_classes
// the object order of each episode is permuted independently.
std::vector<Episode> generate_suite(const EpisodeSpec& spec, std::size_t count, bool shuffle_classes = false);

// Builds a support set for `classes` from K distinct pool episodes (never
// `exclude`), taking each pool episode's target image and the gt mask of the
// matching class. Throws UsageError if the pool is too small.
SupportSet support_from_pool(const std::vector<Episode>& pool, const std::vector<ObjectClass>& classes,
                             std::size_t shots, Rng& rng, std::size_t exclude = static_cast<std::size_t>(-1));

// First `shots` shots of an episode's own support set.
SupportSet own_support(const Episode& ep, std::size_t shots);

// Directory layout: episode.manifest, target.ppgt, gt.ppgt,
// support_<n>_<k>_img.ppgt, support_<n>_<k>_mask.ppgt.
void save_episode(const std::filesystem::path& dir, const Episode& ep);
Episode load_episode(const std::filesystem::path& dir);

// Loads every episode listed in <dir>/index.txt, in order.
std::vector<Episode> load_suite(const std::filesystem::path& dir);

}  // namespace ppg
