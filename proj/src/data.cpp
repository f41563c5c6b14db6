#include "sfiqa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "sfiqa/error.hpp"
#include "sfiqa/io.hpp"

namespace sfiqa::data {

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kUnassigned: return "";
  }
  return "";
}

Split parse_split(const std::string& text) {
  if (text.empty()) return Split::kUnassigned;
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  fail(ErrorKind::kData, "unknown split tag '" + text + "'");
}

std::vector<std::size_t> Dataset::indices(Split which) const {
  std::vector<std::size_t> out;
  if (which == Split::kUnassigned && splits.empty()) {
    out.resize(images.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == which) out.push_back(i);
  return out;
}

Dataset Dataset::subset(Split which) const {
  Dataset out;
  out.name = name;
  for (const auto i : indices(which)) {
    out.images.push_back(images[i]);
    if (labeled()) out.labels.push_back(labels[i]);
    if (!groups.empty()) out.groups.push_back(groups[i]);
    if (!splits.empty()) out.splits.push_back(splits[i]);
  }
  return out;
}

UnlabeledDomain strip_labels(const Dataset& dataset, Split which) {
  UnlabeledDomain out;
  out.name = dataset.name;
  for (const auto i : dataset.indices(which)) out.images.push_back(dataset.images[i]);
  return out;
}

void SyntheticDomainSpec::validate() const {
  require(height >= 1 && width >= 1 && channels >= 1, ErrorKind::kConfig, "synthetic image dims must be >= 1");
  require(images_per_content >= 1, ErrorKind::kConfig, "images_per_content must be >= 1");
  require(blur_sigma.lo >= 0 && blur_sigma.hi >= 0 && blur_sigma.lo != blur_sigma.hi, ErrorKind::kConfig,
          "blur sigma range must be non-negative and non-empty");
  require(noise_sigma.lo >= 0 && noise_sigma.hi >= 0 && noise_sigma.lo != noise_sigma.hi, ErrorKind::kConfig,
          "noise sigma range must be non-negative and non-empty");
  require(contrast_scale.lo > 0 && contrast_scale.hi > 0 && contrast_scale.lo != contrast_scale.hi,
          ErrorKind::kConfig, "contrast scale range must be positive and non-empty");
  require(label_variance >= 0, ErrorKind::kConfig, "label variance must be >= 0");
  require(shift_a.size() == static_cast<std::size_t>(channels) && shift_b.size() == static_cast<std::size_t>(channels),
          ErrorKind::kConfig, "domain shift needs one (a, b) pair per channel");
}

double quality_from_strength(double strength, const RatingScale& scale) {
  return scale.upper() - strength * (scale.upper() - scale.lower());
}

namespace {

Image render_content(const SyntheticDomainSpec& spec, std::uint64_t content_seed) {
  Rng rng(content_seed);
  Image img{spec.channels, spec.height, spec.width,
            std::vector<float>(static_cast<std::size_t>(spec.channels) * spec.height * spec.width)};
  std::vector<double> base(static_cast<std::size_t>(spec.channels));
  for (auto& b : base) b = rng.uniform(0.3, 0.7);
  struct Grating {
    double fx, fy, phase;
    std::vector<double> amp;
  };
  struct Blob {
    double cx, cy, radius;
    std::vector<double> amp;
  };
  std::vector<Grating> gratings(6);
  for (auto& g : gratings) {
    const double f = rng.uniform(0.05, 0.35);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    g.fx = f * std::cos(theta);
    g.fy = f * std::sin(theta);
    g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    g.amp.resize(base.size());
    for (auto& a : g.amp) a = rng.uniform(0.03, 0.12);
  }
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.cx = rng.uniform(0.0, spec.width);
    b.cy = rng.uniform(0.0, spec.height);
    b.radius = rng.uniform(2.0, 8.0);
    b.amp.resize(base.size());
    for (auto& a : b.amp) a = rng.uniform(-0.3, 0.3);
  }
  for (int c = 0; c < spec.channels; ++c)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const auto ci = static_cast<std::size_t>(c);
        double v = base[ci];
        for (const auto& g : gratings)
          v += g.amp[ci] * std::sin(2.0 * std::numbers::pi * (g.fx * x + g.fy * y) + g.phase);
        for (const auto& b : blobs) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
          v += b.amp[ci] * std::exp(-d2 / (2.0 * b.radius * b.radius));
        }
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

int mirror(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

void gaussian_blur(Image& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;
  std::vector<float> tmp(img.pixels.size());
  auto idx = [&](int c, int y, int x) { return (static_cast<std::size_t>(c) * img.height + y) * img.width + x; };
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * img.pixels[idx(c, y, mirror(x + i, img.width))];
        tmp[idx(c, y, x)] = static_cast<float>(acc);
      }
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[idx(c, mirror(y + i, img.height), x)];
        img.pixels[idx(c, y, x)] = static_cast<float>(acc);
      }
}

}  // namespace

Image render_distorted(const SyntheticDomainSpec& spec, std::uint64_t content_seed, Distortion distortion,
                       double strength, std::uint64_t noise_seed) {
  Image img = render_content(spec, content_seed);
  switch (distortion) {
    case Distortion::kBlur: gaussian_blur(img, spec.blur_sigma.lerp(strength)); break;
    case Distortion::kNoise: {
      Rng rng(noise_seed);
      const double sigma = spec.noise_sigma.lerp(strength);
      for (auto& v : img.pixels) v = static_cast<float>(v + sigma * rng.normal());
      break;
    }
    case Distortion::kContrast: {
      const double scale = spec.contrast_scale.lerp(strength);
      const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
      for (int c = 0; c < img.channels; ++c) {
        float* p = img.pixels.data() + c * plane;
        double mean = 0.0;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
        mean /= static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>(mean + scale * (p[i] - mean));
      }
      break;
    }
  }
  return img;
}

void apply_shift(Image& image, const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (int c = 0; c < image.channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    if (a[ci] == 1.0 && b[ci] == 0.0) continue;
    const float fa = static_cast<float>(a[ci]), fb = static_cast<float>(b[ci]);
    float* p = image.pixels.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] = fa * p[i] + fb;
  }
}

Dataset generate_domain(const SyntheticDomainSpec& spec, std::size_t n, const RatingScale& scale,
                        std::vector<SyntheticSample>* draws) {
  spec.validate();
  require(n >= 1, ErrorKind::kConfig, "synthetic domain needs n >= 1");
  Rng rng(spec.seed);
  const std::size_t contents = (n + static_cast<std::size_t>(spec.images_per_content) - 1) /
                               static_cast<std::size_t>(spec.images_per_content);
  std::vector<std::uint64_t> content_seeds(contents);
  for (auto& s : content_seeds) s = rng.next();
  Dataset ds;
  ds.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t content = i / static_cast<std::size_t>(spec.images_per_content);
    const auto distortion = static_cast<Distortion>(rng.index(3));
    const double strength = rng.uniform();
    const std::uint64_t noise_seed = rng.next();
    Image img = render_distorted(spec, content_seeds[content], distortion, strength, noise_seed);
    apply_shift(img, spec.shift_a, spec.shift_b);
    ds.images.push_back(std::move(img));
    ds.labels.push_back({quality_from_strength(strength, scale), spec.label_variance});
    ds.groups.push_back(static_cast<int>(content));
    if (draws) draws->push_back({distortion, strength});
  }
  return ds;
}

QualityLabel rescale_labels(double mos, std::optional<double> variance, const ScoreRange& from,
                            const RatingScale& to, double default_variance) {
  require(from.max > from.min, ErrorKind::kInvalidArgument, "score range must be non-empty");
  require(std::isfinite(mos) && mos >= from.min && mos <= from.max, ErrorKind::kData,
          "score " + io::format_number(mos) + " outside declared range [" + io::format_number(from.min) + ", " +
              io::format_number(from.max) + "]");
  const double slope = (to.upper() - to.lower()) / (from.max - from.min);
  const double offset = (mos - from.min) * slope;
  QualityLabel label;
  label.mean = from.higher_is_better ? to.lower() + offset : to.upper() - offset;
  if (variance) {
    require(*variance >= 0.0, ErrorKind::kData, "negative variance");
    label.variance = *variance * slope * slope;
  } else {
    label.variance = default_variance;
  }
  return label;
}

double unscale_mean(double mean, const ScoreRange& from, const RatingScale& to) {
  const double slope = (from.max - from.min) / (to.upper() - to.lower());
  return from.higher_is_better ? from.min + (mean - to.lower()) * slope : from.min + (to.upper() - mean) * slope;
}

std::vector<Split> split(std::size_t n, const std::vector<int>& groups, const SplitRatios& ratios,
                         std::uint64_t seed) {
  require(ratios.train >= 0 && ratios.val >= 0 && ratios.test >= 0 &&
              std::abs(ratios.train + ratios.val + ratios.test - 1.0) <= 1e-9,
          ErrorKind::kInvalidArgument, "split ratios must be non-negative and sum to 1");
  Rng rng(seed);
  std::vector<Split> out(n, Split::kUnassigned);
  auto allocate = [&](std::size_t units) {
    const auto train = static_cast<std::size_t>(std::floor(ratios.train * static_cast<double>(units) + 1e-9));
    const auto val = static_cast<std::size_t>(std::floor(ratios.val * static_cast<double>(units) + 1e-9));
    return std::array<std::size_t, 2>{train, std::min(val, units - train)};
  };
  auto tag = [](std::size_t pos, const std::array<std::size_t, 2>& cut) {
    return pos < cut[0] ? Split::kTrain : (pos < cut[0] + cut[1] ? Split::kVal : Split::kTest);
  };
  if (groups.empty()) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    const auto cut = allocate(n);
    for (std::size_t p = 0; p < n; ++p) out[order[p]] = tag(p, cut);
    return out;
  }
  require(groups.size() == n, ErrorKind::kSplit, "one content group per image expected");
  const std::set<int> distinct(groups.begin(), groups.end());
  std::vector<int> unique(distinct.begin(), distinct.end());
  rng.shuffle(unique.begin(), unique.end());
  const auto cut = allocate(unique.size());
  const std::size_t test = unique.size() - cut[0] - cut[1];
  if ((ratios.train > 0 && cut[0] == 0) || (ratios.val > 0 && cut[1] == 0) || (ratios.test > 0 && test == 0))
    fail(ErrorKind::kSplit, "content groups larger than split capacity: " + std::to_string(unique.size()) +
                                " groups cannot fill every split");
  std::map<int, Split> by_group;
  for (std::size_t p = 0; p < unique.size(); ++p) by_group[unique[p]] = tag(p, cut);
  for (std::size_t i = 0; i < n; ++i) out[i] = by_group[groups[i]];
  return out;
}

Image crop(const Image& image, int height, int width, CropMode mode, Rng& rng) {
  require(height >= 1 && width >= 1 && height <= image.height && width <= image.width, ErrorKind::kCrop,
          "crop " + std::to_string(height) + "x" + std::to_string(width) + " larger than image " +
              std::to_string(image.height) + "x" + std::to_string(image.width));
  int oy, ox;
  if (mode == CropMode::kCenter) {
    oy = (image.height - height) / 2;
    ox = (image.width - width) / 2;
  } else {
    oy = static_cast<int>(rng.index(static_cast<std::size_t>(image.height - height + 1)));
    ox = static_cast<int>(rng.index(static_cast<std::size_t>(image.width - width + 1)));
  }
  Image out{image.channels, height, width,
            std::vector<float>(static_cast<std::size_t>(image.channels) * height * width)};
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, y + oy, x + ox);
  return out;
}

std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& indices, int batch_size, bool shuffle,
                                              std::uint64_t seed, bool train) {
  require(batch_size >= 1, ErrorKind::kInvalidArgument, "batch size must be >= 1");
  require(!indices.empty(), ErrorKind::kData, "cannot batch an empty dataset");
  std::vector<std::size_t> order = indices;
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<std::size_t>> out;
  const auto b = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += b) {
    const std::size_t end = std::min(order.size(), start + b);
    if (train && end - start < b) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

nn::Tensor<float> make_batch(const std::vector<Image>& images, const std::vector<std::size_t>& indices, int crop_h,
                             int crop_w, CropMode mode, Rng& rng) {
  require(!indices.empty(), ErrorKind::kData, "empty batch");
  const int channels = images.at(indices.front()).channels;
  nn::Tensor<float> t(static_cast<int>(indices.size()), channels, crop_h, crop_w);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Image& src = images.at(indices[b]);
    require(src.channels == channels, ErrorKind::kData, "images in one batch have different channel counts");
    auto dst = t.sample(static_cast<int>(b));
    if (src.height == crop_h && src.width == crop_w) {
      std::copy(src.pixels.begin(), src.pixels.end(), dst.begin());
    } else {
      const Image c = crop(src, crop_h, crop_w, mode, rng);
      std::copy(c.pixels.begin(), c.pixels.end(), dst.begin());
    }
  }
  return t;
}

namespace {

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  require(ec == std::errc() && ptr == end, ErrorKind::kData, "cannot parse " + what + " '" + text + "'");
  return v;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  fail(ErrorKind::kData, "expected a boolean, got '" + text + "'");
}

}  // namespace

ManifestMeta load_manifest_meta(const std::filesystem::path& path) {
  const auto kv = io::parse_key_values(io::read_text(path));
  auto get = [&](const std::string& key) {
    const auto it = kv.find(key);
    require(it != kv.end(), ErrorKind::kData, "manifest sidecar '" + path.string() + "' lacks key '" + key + "'");
    return it->second;
  };
  ManifestMeta meta;
  meta.range.min = parse_double(get("mos_min"), "mos_min");
  meta.range.max = parse_double(get("mos_max"), "mos_max");
  meta.range.higher_is_better = parse_bool(get("higher_is_better"));
  meta.height = static_cast<int>(parse_double(get("height"), "height"));
  meta.width = static_cast<int>(parse_double(get("width"), "width"));
  meta.channels = static_cast<int>(parse_double(get("channels"), "channels"));
  if (const auto it = kv.find("default_variance"); it != kv.end())
    meta.default_variance = parse_double(it->second, "default_variance");
  require(meta.range.max > meta.range.min, ErrorKind::kData, "mos_max must exceed mos_min");
  require(meta.height >= 1 && meta.width >= 1 && meta.channels >= 1, ErrorKind::kData, "image dims must be >= 1");
  return meta;
}

Dataset load_manifest(const std::filesystem::path& manifest, const RatingScale& scale,
                      std::optional<std::filesystem::path> meta_path) {
  const auto meta = load_manifest_meta(meta_path.value_or(std::filesystem::path(manifest).replace_extension(".meta")));
  std::istringstream in(io::read_text(manifest));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kData, "empty manifest '" + manifest.string() + "'");
  const auto header = io::split_csv_line(line);
  const std::vector<std::string> expected{"path", "mos", "variance", "split", "group"};
  require(header == expected, ErrorKind::kData, "manifest header must be path,mos,variance,split,group");
  Dataset ds;
  ds.name = manifest.parent_path().filename().string();
  std::set<std::string> seen;
  std::vector<std::optional<int>> groups;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    auto fields = io::split_csv_line(line);
    fields.resize(5);
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    require(!fields[0].empty(), ErrorKind::kData, where + ": empty path");
    require(seen.insert(fields[0]).second, ErrorKind::kData, where + ": duplicate path '" + fields[0] + "'");
    // an empty mos marks an unlabeled row (target data)
    if (!fields[1].empty()) {
      const double mos = parse_double(fields[1], "mos");
      std::optional<double> variance;
      if (!fields[2].empty()) variance = parse_double(fields[2], "variance");
      ds.labels.push_back(rescale_labels(mos, variance, meta.range, scale, meta.default_variance));
    }
    ds.splits.push_back(parse_split(fields[3]));
    groups.push_back(fields[4].empty() ? std::nullopt
                                       : std::optional<int>(static_cast<int>(parse_double(fields[4], "group"))));
    const auto pixels = io::read_f32_blob(manifest.parent_path() / fields[0]);
    require(pixels.size() == static_cast<std::size_t>(meta.channels) * meta.height * meta.width, ErrorKind::kData,
            where + ": blob size does not match the declared image dims");
    ds.images.push_back({meta.channels, meta.height, meta.width, pixels});
  }
  require(!ds.images.empty(), ErrorKind::kData, "manifest '" + manifest.string() + "' lists no images");
  require(ds.labels.empty() || ds.labels.size() == ds.images.size(), ErrorKind::kData,
          "either every manifest row or none must carry a mos");
  const auto with_group = std::count_if(groups.begin(), groups.end(), [](const auto& g) { return g.has_value(); });
  require(with_group == 0 || with_group == static_cast<std::ptrdiff_t>(groups.size()), ErrorKind::kData,
          "either every manifest row or none must carry a group");
  if (with_group > 0)
    for (const auto& g : groups) ds.groups.push_back(*g);
  const bool any_split = std::any_of(ds.splits.begin(), ds.splits.end(), [](Split s) { return s != Split::kUnassigned; });
  if (!any_split) ds.splits.clear();
  return ds;
}

void write_manifest(const std::filesystem::path& dir, const Dataset& dataset, const ManifestMeta& meta,
                    const RatingScale& scale) {
  std::ostringstream csv;
  csv << "path,mos,variance,split,group\n";
  const double slope = (scale.upper() - scale.lower()) / (meta.range.max - meta.range.min);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/img_%06zu.f32", i);
    io::write_f32_blob(dir / name, dataset.images[i].pixels);
    if (dataset.labeled()) {
      const auto& label = dataset.labels[i];
      csv << name << ',' << io::format_number(unscale_mean(label.mean, meta.range, scale)) << ','
          << io::format_number(label.variance / (slope * slope)) << ',';
    } else {
      csv << name << ",,,";
    }
    csv << (dataset.splits.empty() ? std::string() : to_string(dataset.splits[i])) << ','
       << (dataset.groups.empty() ? std::string() : std::to_string(dataset.groups[i])) << '\n';
  }
  io::write_text(dir / "manifest.csv", csv.str());
  std::ostringstream side;
  side << "mos_min = " << io::format_number(meta.range.min) << "\n"
       << "mos_max = " << io::format_number(meta.range.max) << "\n"
       << "higher_is_better = " << (meta.range.higher_is_better ? "true" : "false") << "\n"
       << "height = " << meta.height << "\nwidth = " << meta.width << "\nchannels = " << meta.channels << "\n"
       << "default_variance = " << io::format_number(meta.default_variance) << "\n";
  io::write_text(dir / "manifest.meta", side.str());
}

metrics::RaterHistogram sample_histogram(const RatingDistribution& q, int raters, Rng& rng) {
  metrics::RaterHistogram h;
  h.counts.assign(q.size(), 0.0);
  for (int r = 0; r < raters; ++r) {
    double u = rng.uniform();
    std::size_t k = 0;
    for (; k + 1 < q.size(); ++k) {
      u -= q[k];
      if (u < 0.0) break;
    }
    h.counts[k] += 1.0;
  }
  return h;
}

std::vector<metrics::RaterHistogram> synthesize_rater_histograms(std::size_t count, int raters, std::uint64_t seed,
                                                                 const RatingScale& scale) {
  require(raters >= 1, ErrorKind::kConfig, "raters must be >= 1");
  Rng rng(seed);
  std::vector<metrics::RaterHistogram> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double mu = std::clamp(3.3 + 0.7 * rng.normal(), scale.lower(), scale.upper());
    const double sigma = rng.uniform(0.5, 1.0);
    out.push_back(sample_histogram(discretize({mu, sigma * sigma}, scale), raters, rng));
  }
  return out;
}

std::vector<metrics::RaterHistogram> load_histograms(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::vector<metrics::RaterHistogram> out;
  bool first = true;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto fields = io::split_csv_line(line);
    if (first) {
      first = false;
      double probe;
      const auto& f0 = fields.front();
      if (std::from_chars(f0.data(), f0.data() + f0.size(), probe).ec != std::errc()) continue;  // header row
    }
    metrics::RaterHistogram h;
    for (const auto& f : fields) h.counts.push_back(parse_double(f, "rater count"));
    require(out.empty() || h.counts.size() == out.front().counts.size(), ErrorKind::kData,
            "histogram rows have different category counts");
    out.push_back(std::move(h));
  }
  require(!out.empty(), ErrorKind::kData, "no histograms in '" + path.string() + "'");
  return out;
}

}  // namespace sfiqa::data
