#include "remic/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "remic/config_io.hpp"
#include "remic/serialize.hpp"

namespace fs = std::filesystem;

namespace remic {

void Sample::validate() const {
  if (images.empty()) throw std::invalid_argument("Sample: no domains");
  if (visibility.size() != images.size())
    throw std::invalid_argument("Sample: visibility size mismatch");
  if (std::none_of(visibility.begin(), visibility.end(), [](uint8_t f) { return f != 0; }))
    throw std::invalid_argument("Sample: all domains marked missing");
  const int h = images[0].height(), w = images[0].width();
  for (const auto& img : images) {
    if (img.batch() != 1 || img.channels() != 1)
      throw std::invalid_argument("Sample: images must be (1, 1, H, W)");
    if (img.height() != h || img.width() != w)
      throw std::invalid_argument("Sample: domain images disagree on size");
  }
  if (seg_mask) {
    if (seg_mask->height() != h || seg_mask->width() != w)
      throw std::invalid_argument("Sample: seg mask size mismatch");
  }
}

int VisibilityMask::num_visible() const {
  int n = 0;
  for (uint8_t f : flags) n += (f != 0);
  return n;
}

void VisibilityMask::validate() const {
  if (flags.empty() || num_visible() == 0)
    throw std::invalid_argument("VisibilityMask: at least one domain must be visible");
}

MaskSpec MaskSpec::parse(const std::string& text) {
  MaskSpec spec;
  auto colon = text.find(':');
  const std::string head = colon == std::string::npos ? text : text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (head == "uniform-k" || head == "uniform_k") {
    spec.mode = MaskMode::uniform_k;
  } else if (head == "fixed-k" || head == "fixed_k") {
    spec.mode = MaskMode::fixed_k;
    spec.k = std::stoi(arg);
  } else if (head == "single-missing" || head == "single_missing") {
    spec.mode = MaskMode::single_missing;
    spec.missing_index = std::stoi(arg);
  } else {
    throw std::invalid_argument("unknown mask mode '" + text + "'");
  }
  return spec;
}

std::string MaskSpec::to_string() const {
  switch (mode) {
    case MaskMode::uniform_k:
      return "uniform-k";
    case MaskMode::fixed_k:
      return "fixed-k:" + std::to_string(k);
    case MaskMode::single_missing:
      return "single-missing:" + std::to_string(missing_index);
  }
  return "?";
}

VisibilityMask sample_visibility(int num_domains, const MaskSpec& spec, Rng& rng) {
  if (num_domains < 1) throw std::invalid_argument("sample_visibility: need >= 1 domain");
  VisibilityMask mask;
  mask.flags.assign(num_domains, 0);
  switch (spec.mode) {
    case MaskMode::single_missing: {
      if (spec.missing_index < 0 || spec.missing_index >= num_domains)
        throw std::invalid_argument("sample_visibility: missing index out of range");
      for (int i = 0; i < num_domains; ++i)
        mask.flags[i] = (i == spec.missing_index) ? 0 : 1;
      // N == 1 would leave nothing visible.
      mask.validate();
      return mask;
    }
    case MaskMode::uniform_k:
    case MaskMode::fixed_k: {
      int k = spec.k;
      if (spec.mode == MaskMode::uniform_k) k = 1 + rng.uniform_int(num_domains);
      if (k < 1 || k > num_domains)
        throw std::invalid_argument("sample_visibility: k = " + std::to_string(k) +
                                    " out of range [1, " + std::to_string(num_domains) + "]");
      // Uniform k-subset via partial Fisher-Yates on the index list.
      std::vector<int> idx(num_domains);
      for (int i = 0; i < num_domains; ++i) idx[i] = i;
      for (int i = 0; i < k; ++i) {
        const int j = i + rng.uniform_int(num_domains - i);
        std::swap(idx[i], idx[j]);
      }
      for (int i = 0; i < k; ++i) mask.flags[idx[i]] = 1;
      mask.validate();
      return mask;
    }
  }
  throw std::logic_error("sample_visibility: unreachable");
}

void SynthConfig::validate() const {
  if (num_domains < 2) throw std::invalid_argument("SynthConfig: need >= 2 domains");
  if (image_size < 8 || image_size % 4 != 0)
    throw std::invalid_argument("SynthConfig: image size must be >= 8 and divisible by 4");
  if (num_train < 1 || num_test < 1)
    throw std::invalid_argument("SynthConfig: need at least one train and one test sample");
  if (num_classes == 1 || num_classes < 0)
    throw std::invalid_argument("SynthConfig: num_classes must be 0 (no masks) or >= 2");
  if (!styles.empty() && static_cast<int>(styles.size()) != num_domains)
    throw std::invalid_argument("SynthConfig: style list size must match num_domains");
}

std::vector<DomainStyle> SynthConfig::effective_styles() const {
  if (!styles.empty()) return styles;
  // Built-in palette; domains beyond four get progressively shifted variants.
  static const DomainStyle base[4] = {
      {1.00, +1.0, 0.00, 3.0, 0.0, 0.0},
      {0.65, -1.0, 0.06, 4.0, 1.3, 0.0},
      {1.60, +1.0, 0.10, 6.0, 0.7, 0.5},
      {0.85, +1.0, 0.14, 9.0, 2.1, 0.25},
  };
  std::vector<DomainStyle> out(num_domains);
  for (int i = 0; i < num_domains; ++i) {
    DomainStyle s = base[i % 4];
    const int round = i / 4;
    if (round > 0) {
      s.gamma *= 1.0 + 0.15 * round;
      s.texture_phase += 0.9 * round;
      s.texture_freq += 2.0 * round;
    }
    out[i] = s;
  }
  return out;
}

namespace {

struct Ellipse {
  double cx, cy, ax, ay, theta;

  // Normalized squared elliptical radius; <= 1 means inside.
  double radius2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / ax;
    const double v = (-dx * s + dy * c) / ay;
    return u * u + v * v;
  }
};

double smoothstep(double e0, double e1, double x) {
  double t = (x - e0) / (e1 - e0);
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

Sample generate_synthetic_sample(const SynthConfig& config, int index) {
  config.validate();
  if (index < 0 || index >= config.num_train + config.num_test)
    throw std::invalid_argument("generate_synthetic_sample: index " + std::to_string(index) +
                                " out of range");
  const int s = config.image_size;
  Rng rng(mix_seed(config.seed, static_cast<uint64_t>(index)));

  // Shared geometry ("skeleton").
  Ellipse organ;
  organ.cx = s * (0.5 + 0.08 * (rng.uniform() * 2 - 1));
  organ.cy = s * (0.5 + 0.08 * (rng.uniform() * 2 - 1));
  organ.ax = s * rng.uniform(0.26, 0.38);
  organ.ay = s * rng.uniform(0.26, 0.38);
  organ.theta = rng.uniform(0.0, M_PI);

  const int num_lesions = 1 + rng.uniform_int(3);
  std::vector<Ellipse> lesions(num_lesions);
  std::vector<int> lesion_class(num_lesions, 1);
  for (int j = 0; j < num_lesions; ++j) {
    // Place the lesion center well inside the organ.
    const double ang = rng.uniform(0.0, 2 * M_PI);
    const double rad = rng.uniform(0.0, 0.55);
    const double c = std::cos(organ.theta), sn = std::sin(organ.theta);
    const double u = rad * std::cos(ang) * organ.ax;
    const double v = rad * std::sin(ang) * organ.ay;
    lesions[j].cx = organ.cx + u * c - v * sn;
    lesions[j].cy = organ.cy + u * sn + v * c;
    lesions[j].ax = s * rng.uniform(0.05, 0.11);
    lesions[j].ay = s * rng.uniform(0.05, 0.11);
    lesions[j].theta = rng.uniform(0.0, M_PI);
    if (config.num_classes >= 2) lesion_class[j] = 1 + j % (config.num_classes - 1);
  }
  const double grad_dir = rng.uniform(0.0, 2 * M_PI);
  const double organ_level = rng.uniform(0.42, 0.52);

  // Base intensity field and label map.
  std::vector<double> base(static_cast<size_t>(s) * s, 0.0);
  Tensor4i mask(1, 1, s, s);
  const double edge_soft = 0.06 * s;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double fx = (x + 0.5), fy = (y + 0.5);
      double v = 0.08 + 0.06 * ((fx * std::cos(grad_dir) + fy * std::sin(grad_dir)) / s + 0.5);
      const double r2 = organ.radius2(fx, fy);
      const double r = std::sqrt(r2);
      if (r < 1.3) {
        const double inside = smoothstep(1.0, 1.0 - edge_soft / std::max(organ.ax, organ.ay), r);
        v += inside * (organ_level * (1.0 - 0.35 * r2));
      }
      int label = 0;
      for (int j = 0; j < num_lesions; ++j) {
        const double lr = std::sqrt(lesions[j].radius2(fx, fy));
        if (lr <= 1.0) label = lesion_class[j];
        const double linside = smoothstep(1.0, 0.75, lr);
        v += 0.28 * linside;
      }
      base[static_cast<size_t>(y) * s + x] = std::clamp(v, 0.0, 1.0);
      mask(0, 0, y, x) = label;
    }
  }

  // Edge magnitude of the base field, normalized to [0, 1].
  std::vector<double> edge(static_cast<size_t>(s) * s, 0.0);
  double edge_max = 0.0;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const auto at = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, s - 1);
        xx = std::clamp(xx, 0, s - 1);
        return base[static_cast<size_t>(yy) * s + xx];
      };
      const double gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
      const double gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
      const double m = std::sqrt(gx * gx + gy * gy);
      edge[static_cast<size_t>(y) * s + x] = m;
      edge_max = std::max(edge_max, m);
    }
  }
  if (edge_max > 0)
    for (auto& e : edge) e /= edge_max;

  Sample sample;
  sample.id = "s" + std::to_string(index);
  sample.visibility.assign(config.num_domains, 1);
  const auto styles = config.effective_styles();
  for (int d = 0; d < config.num_domains; ++d) {
    const DomainStyle& st = styles[d];
    Tensor4f img(1, 1, s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double v = base[static_cast<size_t>(y) * s + x];
        if (st.contrast_sign < 0) v = 1.0 - v;
        v = std::pow(std::max(v, 0.0), st.gamma);
        v += st.texture_amp *
             std::sin(2 * M_PI * st.texture_freq * (x + y) / (2.0 * s) + st.texture_phase);
        v += st.edge_weight * edge[static_cast<size_t>(y) * s + x];
        img(0, 0, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    sample.images.push_back(std::move(img));
  }
  if (config.num_classes >= 2) sample.seg_mask = std::move(mask);
  sample.validate();
  return sample;
}

Dataset make_synthetic_dataset(const SynthConfig& config) {
  config.validate();
  Dataset ds;
  ds.num_domains = config.num_domains;
  ds.image_size = config.image_size;
  ds.num_classes = config.num_classes;
  ds.seed = config.seed;
  for (int i = 0; i < config.num_train; ++i)
    ds.train.push_back(generate_synthetic_sample(config, i));
  for (int i = 0; i < config.num_test; ++i)
    ds.test.push_back(generate_synthetic_sample(config, config.num_train + i));
  return ds;
}

namespace {

void save_split(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  for (size_t i = 0; i < samples.size(); ++i) {
    const Sample& sm = samples[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04zu", i);
    const fs::path sdir = dir / buf;
    fs::create_directories(sdir);
    for (int d = 0; d < sm.num_domains(); ++d)
      write_rmt((sdir / ("domain_" + std::to_string(d) + ".rmt")).string(),
                sm.images[d], 2);
    if (sm.seg_mask) write_rmt((sdir / "mask.rmt").string(), *sm.seg_mask, 2);
  }
}

std::vector<Sample> load_split(const fs::path& dir, int count, int num_domains,
                               int image_size) {
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04d", i);
    const fs::path sdir = dir / buf;
    Sample sm;
    sm.id = buf;
    sm.visibility.assign(num_domains, 1);
    for (int d = 0; d < num_domains; ++d) {
      const fs::path p = sdir / ("domain_" + std::to_string(d) + ".rmt");
      if (!fs::exists(p))
        throw std::runtime_error(p.string() + ": missing domain file");
      Tensor4f img = read_rmt_f32(p.string());
      if (img.batch() != 1 || img.channels() != 1 || img.height() != image_size ||
          img.width() != image_size)
        throw std::runtime_error(p.string() + ": shape mismatch, got " + img.shape_str());
      sm.images.push_back(std::move(img));
    }
    const fs::path mp = sdir / "mask.rmt";
    if (fs::exists(mp)) {
      Tensor4i m = read_rmt_i32(mp.string());
      if (m.height() != image_size || m.width() != image_size)
        throw std::runtime_error(mp.string() + ": shape mismatch");
      sm.seg_mask = std::move(m);
    }
    sm.validate();
    out.push_back(std::move(sm));
  }
  return out;
}

}  // namespace

void save_dataset(const std::string& root, const Dataset& ds) {
  fs::create_directories(root);
  KvFile manifest;
  manifest.set_int("N", ds.num_domains);
  manifest.set_int("H", ds.image_size);
  manifest.set_int("W", ds.image_size);
  manifest.set_int("L", ds.num_classes);
  manifest.set_int("seed", static_cast<int64_t>(ds.seed));
  manifest.set_int("num_train", static_cast<int64_t>(ds.train.size()));
  manifest.set_int("num_test", static_cast<int64_t>(ds.test.size()));
  manifest.write_file((fs::path(root) / "dataset.kv").string());
  save_split(fs::path(root) / "train", ds.train);
  save_split(fs::path(root) / "test", ds.test);
}

Dataset load_dataset(const std::string& root) {
  const fs::path manifest_path = fs::path(root) / "dataset.kv";
  if (!fs::exists(manifest_path))
    throw std::runtime_error(manifest_path.string() + ": dataset manifest not found");
  KvFile manifest = KvFile::parse_file(manifest_path.string());
  Dataset ds;
  ds.num_domains = static_cast<int>(manifest.get_int("N"));
  const int h = static_cast<int>(manifest.get_int("H"));
  const int w = static_cast<int>(manifest.get_int("W"));
  if (h != w) throw std::runtime_error(root + ": only square images are supported");
  ds.image_size = h;
  ds.num_classes = static_cast<int>(manifest.get_int("L"));
  ds.seed = static_cast<uint64_t>(manifest.get_int("seed"));
  const int num_train = static_cast<int>(manifest.get_int("num_train"));
  const int num_test = static_cast<int>(manifest.get_int("num_test"));
  ds.train = load_split(fs::path(root) / "train", num_train, ds.num_domains, ds.image_size);
  ds.test = load_split(fs::path(root) / "test", num_test, ds.num_domains, ds.image_size);
  return ds;
}

void write_pgm(const std::string& path, const Tensor4f& img) {
  if (img.batch() != 1 || img.channels() != 1)
    throw std::invalid_argument("write_pgm: expected (1, 1, H, W)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const float v = std::clamp(img(0, 0, y, x), 0.0f, 1.0f);
      const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0f));
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
  if (!os) throw std::runtime_error(path + ": short write");
}

Tensor4f read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error(path + ": not a binary PGM (P5)");
  auto next_int = [&]() {
    // Skips whitespace and '#' comment lines.
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    int v;
    is >> v;
    if (!is) throw std::runtime_error(path + ": malformed PGM header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error(path + ": unsupported PGM header");
  is.get();  // single whitespace after maxval
  Tensor4f img(1, 1, h, w);
  std::vector<unsigned char> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), w);
    if (is.gcount() != w) throw std::runtime_error(path + ": truncated PGM payload");
    for (int x = 0; x < w; ++x)
      img(0, 0, y, x) = static_cast<float>(row[x]) / static_cast<float>(maxval);
  }
  return img;
}

Dataset ingest_image_tree(const std::string& src, int num_domains) {
  if (num_domains < 2) throw std::invalid_argument("ingest_image_tree: need >= 2 domains");
  Dataset ds;
  ds.num_domains = num_domains;
  ds.num_classes = 0;
  ds.seed = 0;
  for (const char* split : {"train", "test"}) {
    const fs::path dir = fs::path(src) / split;
    if (!fs::exists(dir)) throw std::runtime_error(dir.string() + ": split directory not found");
    std::vector<fs::path> sample_dirs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory()) sample_dirs.push_back(e.path());
    std::sort(sample_dirs.begin(), sample_dirs.end());
    for (const auto& sdir : sample_dirs) {
      Sample sm;
      sm.id = sdir.filename().string();
      sm.visibility.assign(num_domains, 1);
      for (int d = 0; d < num_domains; ++d) {
        const fs::path p = sdir / ("domain_" + std::to_string(d) + ".pgm");
        if (!fs::exists(p)) throw std::runtime_error(p.string() + ": missing domain image");
        sm.images.push_back(read_pgm(p.string()));
      }
      sm.validate();
      const int sz = sm.height();
      if (sm.width() != sz || sz % 4 != 0)
        throw std::runtime_error(sdir.string() + ": images must be square with size divisible by 4");
      if (ds.image_size == 0)
        ds.image_size = sz;
      else if (ds.image_size != sz)
        throw std::runtime_error(sdir.string() + ": image size differs from the rest of the set");
      (std::string(split) == "train" ? ds.train : ds.test).push_back(std::move(sm));
    }
  }
  if (ds.train.empty() || ds.test.empty())
    throw std::runtime_error(src + ": ingestion produced an empty split");
  return ds;
}

}  // namespace remic
