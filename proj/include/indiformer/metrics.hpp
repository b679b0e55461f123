#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "indiformer/errors.hpp"

namespace indiformer::metrics {

struct MetricConfig {
  std::size_t frame_len = 512;  // samples per SegSNR frame
  double snr_cap = 100.0;       // dB
  double eps = 1e-12;           // relative floor of error energies
};

/// Which signal SISNR projects onto. `reference` is the usual scale-invariant
/// definition; `estimate` projects the reference onto the estimate instead.
enum class Projection { reference, estimate };

namespace detail {

inline void require_same_length(std::span<const double> a, std::span<const double> b,
                                const char* op) {
  if (a.size() != b.size()) {
    throw InvalidInput(std::string(op) + ": length mismatch " + std::to_string(a.size()) +
                       " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw InvalidInput(std::string(op) + ": empty signals");
}

inline double energy(std::span<const double> x) {
  return std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
}

inline double error_energy(std::span<const double> est, std::span<const double> ref) {
  double e = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double d = ref[i] - est[i];
    e += d * d;
  }
  return e;
}

inline double ratio_db(double signal, double noise, const MetricConfig& cfg) {
  const double db = 10.0 * std::log10(signal / std::max(noise, cfg.eps * signal));
  return std::clamp(db, -cfg.snr_cap, cfg.snr_cap);
}

}  // namespace detail

/// Global SNR in dB: reference energy over error energy, capped.
inline double snr(std::span<const double> estimate, std::span<const double> reference,
                  const MetricConfig& cfg = {}) {
  detail::require_same_length(estimate, reference, "snr");
  const double sig = detail::energy(reference);
  if (sig == 0.0) throw InvalidInput("snr: reference is all zeros");
  return detail::ratio_db(sig, detail::error_energy(estimate, reference), cfg);
}

/// Mean of per-frame SNRs over floor(len / frame_len) full frames. A frame of
/// silent reference scores +cap if reproduced exactly and -cap otherwise.
inline double seg_snr(std::span<const double> estimate, std::span<const double> reference,
                      const MetricConfig& cfg = {}) {
  detail::require_same_length(estimate, reference, "seg_snr");
  if (cfg.frame_len == 0) throw InvalidInput("seg_snr: frame length must be positive");
  const std::size_t frames = reference.size() / cfg.frame_len;
  if (frames == 0) {
    throw InvalidInput("seg_snr: signal of " + std::to_string(reference.size()) +
                       " samples is shorter than one frame of " +
                       std::to_string(cfg.frame_len));
  }
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    const auto ref = reference.subspan(f * cfg.frame_len, cfg.frame_len);
    const auto est = estimate.subspan(f * cfg.frame_len, cfg.frame_len);
    const double sig = detail::energy(ref);
    const double err = detail::error_energy(est, ref);
    if (sig == 0.0) {
      total += err == 0.0 ? cfg.snr_cap : -cfg.snr_cap;
    } else {
      total += detail::ratio_db(sig, err, cfg);
    }
  }
  return total / static_cast<double>(frames);
}

/// Scale-invariant SNR: x_T is the projection onto the reference, x_E the
/// residual; 10 log10(|x_T|^2 / |x_E|^2), capped at +-snr_cap.
inline double sisnr(std::span<const double> estimate, std::span<const double> reference,
                    const MetricConfig& cfg = {},
                    Projection projection = Projection::reference) {
  detail::require_same_length(estimate, reference, "sisnr");
  const double ref_energy = detail::energy(reference);
  const double est_energy = detail::energy(estimate);
  if (ref_energy == 0.0) throw InvalidInput("sisnr: reference is all zeros");
  if (est_energy == 0.0) throw InvalidInput("sisnr: estimate is all zeros");
  const double cross =
      std::inner_product(estimate.begin(), estimate.end(), reference.begin(), 0.0);

  // target = alpha * basis; residual = estimate - target
  const bool onto_ref = projection == Projection::reference;
  const auto basis = onto_ref ? reference : estimate;
  const double alpha = cross / (onto_ref ? ref_energy : est_energy);
  double target = 0.0, residual = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double t = alpha * basis[i];
    const double e = estimate[i] - t;
    target += t * t;
    residual += e * e;
  }
  if (target == 0.0) return -cfg.snr_cap;
  return detail::ratio_db(target, residual, cfg);
}

/// SISNR improvement of the estimate over the unprocessed mixture.
inline double sisnri(std::span<const double> estimate, std::span<const double> reference,
                     std::span<const double> mixture, const MetricConfig& cfg = {},
                     Projection projection = Projection::reference) {
  detail::require_same_length(estimate, mixture, "sisnri");
  return sisnr(estimate, reference, cfg, projection) -
         sisnr(mixture, reference, cfg, projection);
}

// ---------------------------------------------------------------------------
// Report

/// One separated mixture: estimates in arbitrary order, references with
/// their class labels.
struct ReportItem {
  std::string pair;
  std::vector<std::vector<double>> estimates;
  std::vector<std::vector<double>> references;
  std::vector<std::string> labels;
  std::vector<double> mixture;
};

struct ReportRow {
  std::string pair;
  std::string label;
  double snr_db = 0.0;
  double segsnr_db = 0.0;
  double sisnri_db = 0.0;
};

struct Report {
  std::vector<ReportRow> rows;         // one per (pair, reference)
  std::vector<ReportRow> class_means;  // one per label, sorted by label
  ReportRow mean;                      // over all rows
  std::vector<std::vector<std::size_t>> assignments;  // estimate index per reference

  std::string csv() const;
  std::string text() const;
};

/// Permutation maximizing mean SISNR; perm[i] is the estimate used for
/// reference i.
inline std::vector<std::size_t> best_assignment(
    const std::vector<std::vector<double>>& estimates,
    const std::vector<std::vector<double>>& references, const MetricConfig& cfg = {}) {
  if (estimates.size() != references.size() || estimates.empty()) {
    throw InvalidInput("assignment needs equal, non-zero numbers of estimates (" +
                       std::to_string(estimates.size()) + ") and references (" +
                       std::to_string(references.size()) + ")");
  }
  const std::size_t n = references.size();
  std::vector<std::vector<double>> score(n, std::vector<double>(n));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t e = 0; e < n; ++e) score[r][e] = sisnr(estimates[e], references[r], cfg);
  }
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_total = -1e300;
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) total += score[r][perm[r]];
    if (total > best_total) {
      best_total = total;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline Report report(const std::vector<ReportItem>& items, const MetricConfig& cfg = {}) {
  if (items.empty()) throw InvalidInput("report: no separated mixtures given");
  Report rep;
  std::map<std::string, std::vector<const ReportRow*>> by_label;
  for (const auto& item : items) {
    if (item.labels.size() != item.references.size()) {
      throw InvalidInput("report: pair '" + item.pair + "' has " +
                         std::to_string(item.references.size()) + " references but " +
                         std::to_string(item.labels.size()) + " labels");
    }
    auto perm = best_assignment(item.estimates, item.references, cfg);
    for (std::size_t r = 0; r < item.references.size(); ++r) {
      const auto& est = item.estimates[perm[r]];
      const auto& ref = item.references[r];
      rep.rows.push_back({item.pair, item.labels[r], snr(est, ref, cfg),
                          seg_snr(est, ref, cfg), sisnri(est, ref, item.mixture, cfg)});
    }
    rep.assignments.push_back(std::move(perm));
  }
  auto average = [](const std::string& pair, const std::string& label,
                    const std::vector<const ReportRow*>& rows) {
    ReportRow m{pair, label};
    for (const auto* r : rows) {
      m.snr_db += r->snr_db;
      m.segsnr_db += r->segsnr_db;
      m.sisnri_db += r->sisnri_db;
    }
    const double n = static_cast<double>(rows.size());
    m.snr_db /= n;
    m.segsnr_db /= n;
    m.sisnri_db /= n;
    return m;
  };
  std::vector<const ReportRow*> all;
  for (const auto& r : rep.rows) {
    by_label[r.label].push_back(&r);
    all.push_back(&r);
  }
  for (const auto& [label, rows] : by_label) {
    rep.class_means.push_back(average("class-mean", label, rows));
  }
  rep.mean = average("mean", "all", all);
  return rep;
}

inline std::string Report::csv() const {
  std::ostringstream os;
  os << "pair,class,snr_db,segsnr_db,sisnri_db\n";
  os << std::fixed << std::setprecision(4);
  auto line = [&](const ReportRow& r) {
    os << r.pair << ',' << r.label << ',' << r.snr_db << ',' << r.segsnr_db << ','
       << r.sisnri_db << '\n';
  };
  for (const auto& r : rows) line(r);
  for (const auto& r : class_means) line(r);
  line(mean);
  return os.str();
}

inline std::string Report::text() const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "pair" << std::setw(14) << "class" << std::right
     << std::setw(10) << "SNR" << std::setw(10) << "SegSNR" << std::setw(10) << "SISNRi"
     << '\n';
  os << std::fixed << std::setprecision(2);
  auto line = [&](const ReportRow& r) {
    os << std::left << std::setw(16) << r.pair << std::setw(14) << r.label << std::right
       << std::setw(10) << r.snr_db << std::setw(10) << r.segsnr_db << std::setw(10)
       << r.sisnri_db << '\n';
  };
  for (const auto& r : rows) line(r);
  for (const auto& r : class_means) line(r);
  line(mean);
  return os.str();
}

}  // namespace indiformer::metrics
