#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"

namespace meshnet {
namespace stats {

// ---------------------------------------------------------------------------
// Dense matrix + least squares
// ---------------------------------------------------------------------------

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;  // row-major

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
  double& at(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const {
    return a[static_cast<std::size_t>(i) * cols + j];
  }
};

struct OlsFit {
  std::vector<double> beta;
  std::vector<double> fitted;
  std::vector<double> residuals;
  double r2 = 0.0;
  int df_resid = 0;
};

/// Least squares via Householder QR. Rank deficiency is detected from the
/// R diagonal and reported with the offending column names.
inline OlsFit ols_fit(const Mat& X, const std::vector<double>& y,
                      const std::vector<std::string>& column_names = {}) {
  const int n = X.rows, p = X.cols;
  if (static_cast<int>(y.size()) != n)
    throw ShapeError("ols_fit: response length does not match design rows");
  if (n <= p)
    throw ConfigError("ols_fit: need more rows (" + std::to_string(n) +
                      ") than columns (" + std::to_string(p) + ")");

  Mat A = X;
  std::vector<double> qty = y;
  std::vector<double> rdiag(p, 0.0);

  for (int j = 0; j < p; ++j) {
    double norm = 0;
    for (int i = j; i < n; ++i) norm += A.at(i, j) * A.at(i, j);
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      rdiag[j] = 0.0;
      continue;  // dead column; flagged below
    }
    const double alpha = A.at(j, j) >= 0 ? -norm : norm;
    // v = x - alpha*e1, stored in place below the diagonal
    A.at(j, j) -= alpha;
    double vtv = 0;
    for (int i = j; i < n; ++i) vtv += A.at(i, j) * A.at(i, j);
    for (int k = j + 1; k < p; ++k) {
      double dot = 0;
      for (int i = j; i < n; ++i) dot += A.at(i, j) * A.at(i, k);
      const double s = 2.0 * dot / vtv;
      for (int i = j; i < n; ++i) A.at(i, k) -= s * A.at(i, j);
    }
    double dot = 0;
    for (int i = j; i < n; ++i) dot += A.at(i, j) * qty[i];
    const double s = 2.0 * dot / vtv;
    for (int i = j; i < n; ++i) qty[i] -= s * A.at(i, j);
    rdiag[j] = alpha;
  }

  double max_diag = 0;
  for (int j = 0; j < p; ++j) max_diag = std::max(max_diag, std::abs(rdiag[j]));
  const double tol = std::max(max_diag, 1.0) * 1e-10;
  std::string offending;
  for (int j = 0; j < p; ++j)
    if (std::abs(rdiag[j]) <= tol) {
      if (!offending.empty()) offending += ", ";
      offending += j < static_cast<int>(column_names.size())
                       ? column_names[j]
                       : "column " + std::to_string(j);
    }
  if (!offending.empty())
    throw ConfigError("ols_fit: design matrix is rank deficient (" + offending +
                      ")");

  OlsFit fit;
  fit.beta.assign(p, 0.0);
  for (int j = p - 1; j >= 0; --j) {
    double acc = qty[j];
    for (int k = j + 1; k < p; ++k) acc -= A.at(j, k) * fit.beta[k];
    fit.beta[j] = acc / rdiag[j];
  }
  fit.fitted.assign(n, 0.0);
  fit.residuals.assign(n, 0.0);
  double ss_res = 0, ss_tot = 0, mean_y = 0;
  for (int i = 0; i < n; ++i) mean_y += y[i];
  mean_y /= n;
  for (int i = 0; i < n; ++i) {
    double f = 0;
    for (int j = 0; j < p; ++j) f += X.at(i, j) * fit.beta[j];
    fit.fitted[i] = f;
    fit.residuals[i] = y[i] - f;
    ss_res += fit.residuals[i] * fit.residuals[i];
    ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
  }
  fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  fit.df_resid = n - p;
  return fit;
}

// ---------------------------------------------------------------------------
// F-distribution upper tail (through the regularized incomplete beta)
// ---------------------------------------------------------------------------

namespace detail {

inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) -
                             std::lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

/// P(F > f) for an F(d1, d2) variate.
inline double f_survival(double f, double d1, double d2) {
  if (!(f > 0.0)) return 1.0;
  if (std::isinf(f)) return 0.0;
  return ibeta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

// ---------------------------------------------------------------------------
// Cohort records and the covariate design
// ---------------------------------------------------------------------------

enum class Method { reference, meshnet };

/// One subject's covariates and per-ROI volumes under both methods.
/// Volumes are voxel counts; brain volume is the sum over all ROIs.
struct SubjectRecord {
  std::string id;
  double age = 0;
  int gender = 0;  // 0 male, 1 female
  int site = 0;
  int group = 0;  // 0 control, 1 patient
  std::vector<double> roi_reference;
  std::vector<double> roi_meshnet;

  double brain_volume(Method m) const {
    const auto& v = m == Method::reference ? roi_reference : roi_meshnet;
    double s = 0;
    for (double x : v) s += x;
    return s;
  }
  const std::vector<double>& roi(Method m) const {
    return m == Method::reference ? roi_reference : roi_meshnet;
  }
};

inline void validate_records(const std::vector<SubjectRecord>& records,
                             double min_age = 0.0, double max_age = 130.0) {
  if (records.empty()) throw ConfigError("stats: empty cohort");
  const std::size_t nroi = records.front().roi_reference.size();
  for (const auto& r : records) {
    if (r.age < min_age || r.age > max_age)
      throw ConfigError("stats: subject " + r.id + " age " +
                        std::to_string(r.age) + " outside plausible range");
    if (r.roi_reference.size() != nroi || r.roi_meshnet.size() != nroi)
      throw ShapeError("stats: subject " + r.id + " has inconsistent ROI count");
    for (double v : r.roi_reference)
      if (v < 0) throw ConfigError("stats: negative volume for " + r.id);
    for (double v : r.roi_meshnet)
      if (v < 0) throw ConfigError("stats: negative volume for " + r.id);
  }
}

struct DesignMatrix {
  Mat X;
  std::vector<std::string> column_names;
  std::vector<int> site_levels;  // ascending; first one is the reference
};

/// Covariate design: intercept, age, age^2, gender, V_brain, gender:age,
/// gender:V_brain, then one dummy per non-reference site (reference =
/// lowest site id). 13 columns for a 7-site cohort. The intercept is
/// required for the site dummies to be identifiable.
inline DesignMatrix build_design(const std::vector<SubjectRecord>& records,
                                 Method method) {
  validate_records(records);
  DesignMatrix d;
  for (const auto& r : records)
    if (std::find(d.site_levels.begin(), d.site_levels.end(), r.site) ==
        d.site_levels.end())
      d.site_levels.push_back(r.site);
  std::sort(d.site_levels.begin(), d.site_levels.end());

  const int n = static_cast<int>(records.size());
  const int n_sites = static_cast<int>(d.site_levels.size());
  const int p = 7 + (n_sites - 1);
  d.column_names = {"intercept",   "age",        "age2",        "gender",
                    "v_brain",     "gender:age", "gender:v_brain"};
  for (int s = 1; s < n_sites; ++s)
    d.column_names.push_back("site_" + std::to_string(d.site_levels[s]));

  d.X = Mat(n, p);
  for (int i = 0; i < n; ++i) {
    const SubjectRecord& r = records[i];
    const double vb = r.brain_volume(method);
    d.X.at(i, 0) = 1.0;
    d.X.at(i, 1) = r.age;
    d.X.at(i, 2) = r.age * r.age;
    d.X.at(i, 3) = r.gender;
    d.X.at(i, 4) = vb;
    d.X.at(i, 5) = r.gender * r.age;
    d.X.at(i, 6) = r.gender * vb;
    for (int s = 1; s < n_sites; ++s)
      d.X.at(i, 7 + s - 1) = (r.site == d.site_levels[s]) ? 1.0 : 0.0;
  }
  return d;
}

/// Response vector V_roi for one (roi, method).
inline std::vector<double> roi_response(const std::vector<SubjectRecord>& records,
                                        Method method, int roi) {
  std::vector<double> y(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    y[i] = records[i].roi(method).at(roi);
  return y;
}

// ---------------------------------------------------------------------------
// Repeated-measures ANOVA: method (within subject) x label (between)
// ---------------------------------------------------------------------------

struct AnovaResult {
  double f_method = 0, p_method = 1;
  double f_label = 0, p_label = 1;
  double f_interaction = 0, p_interaction = 1;
  int df_error = 0;  // N - 2 for both strata with two methods
};

/// One residual pair per subject. `group` is the between-subject label
/// (0 control, 1 patient).
struct ResidualPair {
  double reference = 0;
  double meshnet = 0;
  int group = 0;
};

namespace detail {

inline double safe_f(double ss_effect, double ms_error) {
  if (ms_error > 0) return ss_effect / ms_error;
  return ss_effect > 0 ? std::numeric_limits<double>::infinity() : 0.0;
}

}  // namespace detail

/// Split-plot ANOVA with subject as the blocking unit. With two methods
/// the strata separate exactly: subject sums carry the label effect
/// against the subject-within-group error, subject differences carry the
/// method and method:label effects against the subject-x-method error.
/// All three F statistics have (1, N-2) degrees of freedom.
inline AnovaResult rm_anova(const std::vector<ResidualPair>& pairs) {
  const int n = static_cast<int>(pairs.size());
  std::array<int, 2> ng{0, 0};
  for (const auto& p : pairs) {
    if (p.group != 0 && p.group != 1)
      throw ConfigError("rm_anova: group labels must be 0 or 1");
    ++ng[p.group];
  }
  if (ng[0] < 2 || ng[1] < 2)
    throw ConfigError("rm_anova: each group needs at least 2 subjects");

  // Per-subject sum (between stratum) and difference (within stratum).
  std::array<double, 2> sum_s{0, 0}, sum_d{0, 0};
  for (const auto& p : pairs) {
    sum_s[p.group] += p.reference + p.meshnet;
    sum_d[p.group] += p.reference - p.meshnet;
  }
  const double s_bar = (sum_s[0] + sum_s[1]) / n;
  const double d_bar = (sum_d[0] + sum_d[1]) / n;
  const std::array<double, 2> s_bar_g{sum_s[0] / ng[0], sum_s[1] / ng[1]};
  const std::array<double, 2> d_bar_g{sum_d[0] / ng[0], sum_d[1] / ng[1]};

  double ss_subj_within = 0, ss_err_within = 0;
  for (const auto& p : pairs) {
    const double s = p.reference + p.meshnet;
    const double d = p.reference - p.meshnet;
    ss_subj_within += (s - s_bar_g[p.group]) * (s - s_bar_g[p.group]);
    ss_err_within += (d - d_bar_g[p.group]) * (d - d_bar_g[p.group]);
  }
  // halves: y = (s +- d)/2, so SS in y units carry a factor 1/2
  ss_subj_within /= 2.0;
  ss_err_within /= 2.0;
  const double ss_label = (ng[0] * (s_bar_g[0] - s_bar) * (s_bar_g[0] - s_bar) +
                           ng[1] * (s_bar_g[1] - s_bar) * (s_bar_g[1] - s_bar)) /
                          2.0;
  const double ss_method = n * d_bar * d_bar / 2.0;
  const double ss_inter = (ng[0] * (d_bar_g[0] - d_bar) * (d_bar_g[0] - d_bar) +
                           ng[1] * (d_bar_g[1] - d_bar) * (d_bar_g[1] - d_bar)) /
                          2.0;

  AnovaResult r;
  r.df_error = n - 2;
  const double ms_between = ss_subj_within / r.df_error;
  const double ms_within = ss_err_within / r.df_error;
  r.f_label = detail::safe_f(ss_label, ms_between);
  r.f_method = detail::safe_f(ss_method, ms_within);
  r.f_interaction = detail::safe_f(ss_inter, ms_within);
  r.p_label = f_survival(r.f_label, 1.0, r.df_error);
  r.p_method = f_survival(r.f_method, 1.0, r.df_error);
  r.p_interaction = f_survival(r.f_interaction, 1.0, r.df_error);
  return r;
}

// ---------------------------------------------------------------------------
// Cohen's d
// ---------------------------------------------------------------------------

/// Standardized mean difference (A - B) with pooled standard deviation
/// weighted by (n_A - 1, n_B - 1). Groups are independent samples.
inline double cohens_d(const std::vector<double>& a,
                       const std::vector<double>& b) {
  const std::size_t na = a.size(), nb = b.size();
  if (na < 2 || nb < 2)
    throw ConfigError("cohens_d: each group needs at least 2 values");
  double ma = 0, mb = 0;
  for (double x : a) ma += x;
  for (double x : b) mb += x;
  ma /= na;
  mb /= nb;
  double va = 0, vb = 0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  const double pooled = (va + vb) / (na + nb - 2);
  if (pooled == 0.0) {
    if (ma == mb) return 0.0;
    throw ConfigError("cohens_d: zero pooled variance with unequal means");
  }
  return (ma - mb) / std::sqrt(pooled);
}

// ---------------------------------------------------------------------------
// Four-bucket ROI classification
// ---------------------------------------------------------------------------

enum class RoiBucket {
  label_only,        // label significant, interaction not
  both,              // label and interaction significant
  neither,           // nothing significant
  interaction_only,  // interaction significant, label not
};

inline const char* bucket_name(RoiBucket b) {
  switch (b) {
    case RoiBucket::label_only: return "label_only";
    case RoiBucket::both: return "label_and_interaction";
    case RoiBucket::neither: return "neither";
    case RoiBucket::interaction_only: return "interaction_only";
  }
  return "?";
}

inline RoiBucket classify_one(const AnovaResult& r, double alpha) {
  const bool label = r.p_label < alpha;
  const bool inter = r.p_interaction < alpha;
  if (label && !inter) return RoiBucket::label_only;
  if (label && inter) return RoiBucket::both;
  if (!label && !inter) return RoiBucket::neither;
  return RoiBucket::interaction_only;
}

struct RoiResult {
  std::string name;
  AnovaResult anova;
  double d_reference = 0;  // Cohen's d control vs patient, per method
  double d_meshnet = 0;
  RoiBucket bucket = RoiBucket::neither;
};

struct RoiClassification {
  std::vector<RoiResult> rois;
  std::array<std::vector<int>, 4> buckets;  // roi indices per bucket

  const std::vector<int>& bucket(RoiBucket b) const {
    return buckets[static_cast<int>(b)];
  }
};

inline RoiClassification classify_rois(std::vector<RoiResult> rois,
                                       double alpha = 0.05) {
  RoiClassification out;
  out.rois = std::move(rois);
  for (std::size_t i = 0; i < out.rois.size(); ++i) {
    out.rois[i].bucket = classify_one(out.rois[i].anova, alpha);
    out.buckets[static_cast<int>(out.rois[i].bucket)].push_back(
        static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end cohort analysis
// ---------------------------------------------------------------------------

/// Runs the full meta-analysis: per-method covariate adjustment of each
/// ROI volume, repeated-measures ANOVA on the residual pairs, Cohen's d of
/// the group difference per method, and the significance classification.
inline RoiClassification analyze_cohort(const std::vector<SubjectRecord>& records,
                                        const std::vector<std::string>& roi_names,
                                        double alpha = 0.05) {
  validate_records(records);
  const int nroi = static_cast<int>(records.front().roi_reference.size());
  if (static_cast<int>(roi_names.size()) != nroi)
    throw ShapeError("analyze_cohort: roi name count mismatch");

  const DesignMatrix dref = build_design(records, Method::reference);
  const DesignMatrix dmesh = build_design(records, Method::meshnet);

  std::vector<RoiResult> rois(nroi);
  for (int roi = 0; roi < nroi; ++roi) {
    const OlsFit fr = ols_fit(dref.X, roi_response(records, Method::reference, roi),
                              dref.column_names);
    const OlsFit fm = ols_fit(dmesh.X, roi_response(records, Method::meshnet, roi),
                              dmesh.column_names);
    std::vector<ResidualPair> pairs(records.size());
    std::vector<double> ref_control, ref_patient, mesh_control, mesh_patient;
    for (std::size_t i = 0; i < records.size(); ++i) {
      pairs[i] = {fr.residuals[i], fm.residuals[i], records[i].group};
      (records[i].group == 0 ? ref_control : ref_patient).push_back(fr.residuals[i]);
      (records[i].group == 0 ? mesh_control : mesh_patient).push_back(fm.residuals[i]);
    }
    RoiResult& r = rois[roi];
    r.name = roi_names[roi];
    r.anova = rm_anova(pairs);
    r.d_reference = cohens_d(ref_control, ref_patient);
    r.d_meshnet = cohens_d(mesh_control, mesh_patient);
  }
  return classify_rois(std::move(rois), alpha);
}

/// Per-ROI report plus a bucket summary.
inline void write_stats_report(std::ostream& os, const RoiClassification& c) {
  os << "roi\tf_method\tp_method\tf_label\tp_label\tf_interaction\t"
        "p_interaction\td_reference\td_meshnet\tbucket\n";
  for (const auto& r : c.rois)
    os << r.name << "\t" << r.anova.f_method << "\t" << r.anova.p_method << "\t"
       << r.anova.f_label << "\t" << r.anova.p_label << "\t"
       << r.anova.f_interaction << "\t" << r.anova.p_interaction << "\t"
       << r.d_reference << "\t" << r.d_meshnet << "\t"
       << bucket_name(r.bucket) << "\n";
  os << "# bucket summary:";
  for (int b = 0; b < 4; ++b)
    os << " " << bucket_name(static_cast<RoiBucket>(b)) << "="
       << c.buckets[b].size();
  os << "\n";
}

// ---------------------------------------------------------------------------
// Cohort table IO: one row per (subject, method), tab- or comma-separated:
// subject method age gender site group <roi columns...>
// ---------------------------------------------------------------------------

struct CohortTable {
  std::vector<SubjectRecord> records;
  std::vector<std::string> roi_names;
};

inline CohortTable load_cohort_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path + ": file not found");
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty table");
  const char sep = line.find('\t') != std::string::npos ? '\t' : ',';

  auto split = [sep](const std::string& s) {
    std::vector<std::string> out;
    std::string tok;
    std::istringstream is(s);
    while (std::getline(is, tok, sep)) out.push_back(tok);
    return out;
  };

  const std::vector<std::string> header = split(line);
  if (header.size() < 7 || header[0] != "subject" || header[1] != "method")
    throw FormatError(path +
                      ": header must start 'subject method age gender site "
                      "group' followed by ROI columns");
  CohortTable table;
  table.roi_names.assign(header.begin() + 6, header.end());
  const std::size_t nroi = table.roi_names.size();

  std::map<std::string, std::size_t> index;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tok = split(line);
    if (tok.size() != 6 + nroi)
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected " + std::to_string(6 + nroi) + " fields");
    const std::string& id = tok[0];
    auto [it, inserted] = index.try_emplace(id, table.records.size());
    if (inserted) {
      SubjectRecord r;
      r.id = id;
      r.age = std::stod(tok[2]);
      r.gender = std::stoi(tok[3]);
      r.site = std::stoi(tok[4]);
      r.group = (tok[5] == "patient" || tok[5] == "1") ? 1 : 0;
      table.records.push_back(std::move(r));
    }
    SubjectRecord& r = table.records[it->second];
    std::vector<double> vols(nroi);
    for (std::size_t i = 0; i < nroi; ++i) vols[i] = std::stod(tok[6 + i]);
    if (tok[1] == "reference")
      r.roi_reference = std::move(vols);
    else if (tok[1] == "meshnet")
      r.roi_meshnet = std::move(vols);
    else
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": method must be 'reference' or 'meshnet'");
  }
  for (const auto& r : table.records) {
    if (r.roi_reference.size() != nroi)
      throw FormatError(path + ": subject " + r.id + " missing reference row");
    if (r.roi_meshnet.size() != nroi)
      throw FormatError(path + ": subject " + r.id + " missing meshnet row");
  }
  return table;
}

}  // namespace stats
}  // namespace meshnet
