#include <cstdio>
#include <iomanip>
#include <sstream>

#include "remic/config_io.hpp"
#include "remic/eval.hpp"

namespace remic {

namespace {

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

void MetricsReport::write_kv(const std::string& path) const {
  KvFile kv;
  kv.set_string("protocol", protocol);
  kv.set_string("config", config_echo);
  kv.set_int("num_domains", num_domains);
  kv.set_int("sample_count", sample_count);
  for (int d = 0; d < num_domains; ++d) {
    const auto& agg = per_domain[static_cast<size_t>(d)];
    const std::string p = "domain" + std::to_string(d) + ".";
    kv.set_int(p + "count", agg.count);
    if (agg.count > 0) {
      kv.set_double(p + "mae", agg.mae);
      kv.set_double(p + "nrmse", agg.nrmse);
      kv.set_double(p + "psnr", agg.psnr);
      kv.set_double(p + "ssim", agg.ssim);
    }
  }
  kv.set_bool("dice.present", has_dice);
  if (has_dice) {
    kv.set_int("dice.count", dice_count);
    kv.set_double("dice.mean", dice_mean);
    for (size_t l = 0; l < dice_per_class.size(); ++l)
      kv.set_double("dice.class" + std::to_string(l), dice_per_class[l]);
  }
  kv.write_file(path);
}

MetricsReport MetricsReport::read_kv(const std::string& path) {
  KvFile kv = KvFile::parse_file(path);
  MetricsReport r;
  r.protocol = kv.get_string("protocol");
  r.config_echo = kv.get_string("config");
  r.num_domains = static_cast<int>(kv.get_int("num_domains"));
  r.sample_count = kv.get_int("sample_count");
  r.per_domain.assign(static_cast<size_t>(r.num_domains), {});
  for (int d = 0; d < r.num_domains; ++d) {
    auto& agg = r.per_domain[static_cast<size_t>(d)];
    const std::string p = "domain" + std::to_string(d) + ".";
    agg.count = kv.get_int(p + "count");
    if (agg.count > 0) {
      agg.mae = kv.get_double(p + "mae");
      agg.nrmse = kv.get_double(p + "nrmse");
      agg.psnr = kv.get_double(p + "psnr");
      agg.ssim = kv.get_double(p + "ssim");
    }
  }
  r.has_dice = kv.get_bool("dice.present");
  if (r.has_dice) {
    r.dice_count = kv.get_int("dice.count");
    r.dice_mean = kv.get_double("dice.mean");
    for (int l = 0;; ++l) {
      const std::string key = "dice.class" + std::to_string(l);
      if (!kv.has(key)) break;
      r.dice_per_class.push_back(kv.get_double(key));
    }
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "protocol: " << protocol << "    samples: " << sample_count << "\n";
  os << "config:   " << config_echo << "\n";
  os << "\n";
  os << std::left << std::setw(10) << "domain" << std::right << std::setw(10) << "MAE(v)"
     << std::setw(10) << "NRMSE(v)" << std::setw(10) << "PSNR(^)" << std::setw(10)
     << "SSIM(^)" << "\n";
  for (int d = 0; d < num_domains; ++d) {
    const auto& agg = per_domain[static_cast<size_t>(d)];
    os << std::left << std::setw(10) << ("domain_" + std::to_string(d));
    if (agg.count == 0) {
      os << std::right << std::setw(10) << "-" << std::setw(10) << "-" << std::setw(10)
         << "-" << std::setw(10) << "-";
    } else {
      os << std::right << std::setw(10) << fmt(agg.mae) << std::setw(10) << fmt(agg.nrmse)
         << std::setw(10) << fmt(agg.psnr) << std::setw(10) << fmt(agg.ssim);
    }
    os << "\n";
  }
  if (has_dice) {
    os << "\ndice mean: " << fmt(dice_mean, 3) << "   per-class:";
    for (size_t l = 0; l < dice_per_class.size(); ++l)
      os << " class" << l << "=" << fmt(dice_per_class[l], 3);
    os << "   (over " << dice_count << " evaluations)\n";
  }
  return os.str();
}

std::string format_report_table(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("format_report_table: no reports");
  int domains = 0;
  for (const auto& r : reports) domains = std::max(domains, r.num_domains);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header;
  header.push_back("method");
  for (int d = 0; d < domains; ++d)
    header.push_back("domain_" + std::to_string(d) + "  NRMSE(v)/SSIM(^)/PSNR(^)");
  header.push_back("dice");
  rows.push_back(header);

  for (const auto& r : reports) {
    std::vector<std::string> row;
    row.push_back(r.protocol + " [" + r.config_echo + "]");
    for (int d = 0; d < domains; ++d) {
      if (d >= r.num_domains || r.per_domain[static_cast<size_t>(d)].count == 0) {
        row.push_back("-");
        continue;
      }
      const auto& agg = r.per_domain[static_cast<size_t>(d)];
      row.push_back(fmt(agg.nrmse) + " / " + fmt(agg.ssim) + " / " + fmt(agg.psnr));
    }
    row.push_back(r.has_dice ? fmt(r.dice_mean, 3) : "-");
    rows.push_back(row);
  }

  std::vector<size_t> widths(rows[0].size(), 0);
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());

  std::ostringstream os;
  for (size_t ri = 0; ri < rows.size(); ++ri) {
    for (size_t c = 0; c < rows[ri].size(); ++c) {
      os << std::left << std::setw(static_cast<int>(widths[c]) + 2) << rows[ri][c];
      if (c + 1 < rows[ri].size()) os << "| ";
    }
    os << "\n";
    if (ri == 0) {
      size_t total = 0;
      for (size_t c = 0; c < widths.size(); ++c) total += widths[c] + 4;
      os << std::string(total, '-') << "\n";
    }
  }
  return os.str();
}

}  // namespace remic
