#ifndef REMIC_DATA_HPP
#define REMIC_DATA_HPP

#include <optional>
#include <string>
#include <vector>

#include "remic/rng.hpp"
#include "remic/tensor.hpp"

namespace remic {

// One subject: N co-registered single-channel images in [0,1], an optional
// integer label map, and per-domain visibility flags.
struct Sample {
  std::string id;
  std::vector<Tensor4f> images;     // each (1, 1, H, W)
  std::vector<uint8_t> visibility;  // one flag per domain
  std::optional<Tensor4i> seg_mask; // (1, 1, H, W), labels in {0..L-1}

  int num_domains() const { return static_cast<int>(images.size()); }
  int height() const { return images.at(0).height(); }
  int width() const { return images.at(0).width(); }
  void validate() const;
};

struct VisibilityMask {
  std::vector<uint8_t> flags;

  int num_visible() const;
  void validate() const;  // at least one visible
};

enum class MaskMode { uniform_k, fixed_k, single_missing };

struct MaskSpec {
  MaskMode mode = MaskMode::uniform_k;
  int k = 1;              // fixed_k
  int missing_index = 0;  // single_missing

  static MaskSpec parse(const std::string& text);
  std::string to_string() const;
};

VisibilityMask sample_visibility(int num_domains, const MaskSpec& spec, Rng& rng);

// Per-domain intensity transform of the shared scene.
struct DomainStyle {
  double gamma = 1.0;
  double contrast_sign = 1.0;  // < 0 inverts intensities
  double texture_amp = 0.0;
  double texture_freq = 4.0;
  double texture_phase = 0.0;
  double edge_weight = 0.0;
};

struct SynthConfig {
  int num_domains = 3;
  int image_size = 32;
  int num_train = 64;
  int num_test = 16;
  int num_classes = 2;  // 0 = no segmentation masks; otherwise >= 2
  uint64_t seed = 7;
  std::vector<DomainStyle> styles;  // empty = built-in defaults

  void validate() const;
  std::vector<DomainStyle> effective_styles() const;
};

// Deterministic scene: one elliptical "organ" plus 1-3 nested lesion blobs,
// rendered through each domain's intensity transform. Fully determined by
// (config, index).
Sample generate_synthetic_sample(const SynthConfig& config, int index);

struct Dataset {
  int num_domains = 0;
  int image_size = 0;
  int num_classes = 0;
  uint64_t seed = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

Dataset make_synthetic_dataset(const SynthConfig& config);

// Layout: <root>/{train,test}/<sample_id>/domain_<i>.rmt (+ mask.rmt),
// plus a plain-text key-value manifest `dataset.kv` at the root.
void save_dataset(const std::string& root, const Dataset& ds);
Dataset load_dataset(const std::string& root);

// 8-bit binary PGM (P5), the image-dump format for the CLI and the optional
// grayscale ingestion path.
void write_pgm(const std::string& path, const Tensor4f& img);
Tensor4f read_pgm(const std::string& path);

// Converts <src>/{train,test}/<sample>/domain_<i>.pgm trees into a dataset.
Dataset ingest_image_tree(const std::string& src, int num_domains);

}  // namespace remic

#endif
