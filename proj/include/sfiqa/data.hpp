#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sfiqa/distmath.hpp"
#include "sfiqa/metrics.hpp"
#include "sfiqa/nn/tensor.hpp"
#include "sfiqa/rng.hpp"

namespace sfiqa::data {

/// Channel-major float image.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

enum class Split { kUnassigned, kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& text);

/// Images with optional quality labels, content groups and split tags, all
/// indexed in parallel.
struct Dataset {
  std::string name;
  std::vector<Image> images;
  std::vector<QualityLabel> labels;  // empty for unlabeled data
  std::vector<int> groups;           // content group per image, or empty
  std::vector<Split> splits;         // empty until split

  std::size_t size() const { return images.size(); }
  bool labeled() const { return labels.size() == images.size() && !images.empty(); }
  std::vector<std::size_t> indices(Split split) const;
  /// Sub-dataset of one split (labels, groups carried along).
  Dataset subset(Split split) const;
};

/// Target-domain data as seen by adaptation: images only.
struct UnlabeledDomain {
  std::string name;
  std::vector<Image> images;
};

UnlabeledDomain strip_labels(const Dataset& dataset, Split split);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double lerp(double t) const { return lo + (hi - lo) * t; }
};

enum class Distortion { kBlur, kNoise, kContrast };

/// Procedural IQA domain: textured content, one distortion per image whose
/// strength s in [0, 1] maps to quality upper - s * (upper - lower).
struct SyntheticDomainSpec {
  std::uint64_t seed = 0;
  int height = 32;
  int width = 32;
  int channels = 3;
  int images_per_content = 10;
  Range blur_sigma{0.0, 2.5};
  Range noise_sigma{0.0, 0.3};
  Range contrast_scale{1.0, 0.25};
  double label_variance = 0.25;
  /// Post-distortion per-channel affine x' = a x + b.
  std::vector<double> shift_a{1.0, 1.0, 1.0};
  std::vector<double> shift_b{0.0, 0.0, 0.0};

  void validate() const;
};

struct SyntheticSample {
  Distortion distortion = Distortion::kBlur;
  double strength = 0.0;
};

/// Quality of a distortion strength on the scale.
double quality_from_strength(double strength, const RatingScale& scale);

/// Deterministic in `spec` (including its seed). Also returns the per-image
/// distortion draws when `draws` is non-null.
Dataset generate_domain(const SyntheticDomainSpec& spec, std::size_t n, const RatingScale& scale,
                        std::vector<SyntheticSample>* draws = nullptr);

/// Renders one image of content `content_seed` with the given distortion,
/// before the domain shift.
Image render_distorted(const SyntheticDomainSpec& spec, std::uint64_t content_seed, Distortion distortion,
                       double strength, std::uint64_t noise_seed);

void apply_shift(Image& image, const std::vector<double>& a, const std::vector<double>& b);

struct ScoreRange {
  double min = 1.0;
  double max = 5.0;
  bool higher_is_better = true;
};

/// Maps a MOS/DMOS on `from` to the scale, flipping lower-is-better scores;
/// the variance scales with the squared slope.
QualityLabel rescale_labels(double mos, std::optional<double> variance, const ScoreRange& from,
                            const RatingScale& to, double default_variance);

/// Inverse of rescale_labels for the mean.
double unscale_mean(double mean, const ScoreRange& from, const RatingScale& to);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Assigns splits. With groups, whole groups are allocated
/// floor(train * G) / floor(val * G) / rest; otherwise images are allocated
/// floor(train * n) / floor(val * n) / rest.
std::vector<Split> split(std::size_t n, const std::vector<int>& groups, const SplitRatios& ratios,
                         std::uint64_t seed);

enum class CropMode { kRandom, kCenter };

Image crop(const Image& image, int height, int width, CropMode mode, Rng& rng);

/// Index batches over `indices`. Train mode drops the trailing partial batch.
std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& indices, int batch_size, bool shuffle,
                                              std::uint64_t seed, bool train);

/// Stacks (cropped) images into a tensor.
nn::Tensor<float> make_batch(const std::vector<Image>& images, const std::vector<std::size_t>& indices, int crop_h,
                             int crop_w, CropMode mode, Rng& rng);

/// Sidecar metadata of a manifest.
struct ManifestMeta {
  ScoreRange range;
  int height = 0;
  int width = 0;
  int channels = 0;
  double default_variance = 0.25;
};

/// Reads `manifest.csv` (header path,mos,variance,split,group) and its
/// sidecar; blob paths are relative to the manifest's directory.
Dataset load_manifest(const std::filesystem::path& manifest, const RatingScale& scale,
                      std::optional<std::filesystem::path> meta_path = std::nullopt);

ManifestMeta load_manifest_meta(const std::filesystem::path& path);

/// Writes images as blobs plus manifest.csv and manifest.meta into `dir`.
/// Labels are written as MOS on `range` (the inverse of rescaling).
void write_manifest(const std::filesystem::path& dir, const Dataset& dataset, const ManifestMeta& meta,
                    const RatingScale& scale);

/// Rater histograms of synthetic images: MOS ~ N(3.3, 0.7) clipped to the
/// scale, rater spread sigma ~ U(0.5, 1.0), raters drawn from the
/// discretised Gaussian.
std::vector<metrics::RaterHistogram> synthesize_rater_histograms(std::size_t count, int raters, std::uint64_t seed,
                                                                 const RatingScale& scale);

/// Draws `raters` category indices from q.
metrics::RaterHistogram sample_histogram(const RatingDistribution& q, int raters, Rng& rng);

/// CSV with one histogram per row (columns c1..cK, header optional).
std::vector<metrics::RaterHistogram> load_histograms(const std::filesystem::path& path);

}  // namespace sfiqa::data
