#include "spectraseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

namespace spectraseg {

namespace {

void expect(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace

std::vector<int> boundary(const std::vector<uint8_t>& mask, int width, int height) {
    expect(mask.size() == static_cast<size_t>(width) * height, "boundary: mask size mismatch");
    expect(std::find(mask.begin(), mask.end(), uint8_t(1)) != mask.end(), "boundary: empty mask");
    std::vector<int> out;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            size_t p = static_cast<size_t>(y) * width + x;
            if (!mask[p]) continue;
            bool edge = x == 0 || x == width - 1 || y == 0 || y == height - 1 || !mask[p - 1] ||
                        !mask[p + 1] || !mask[p - width] || !mask[p + width];
            if (edge) out.push_back(static_cast<int>(p));
        }
    return out;
}

std::vector<double> nn_distances_brute(const std::vector<int>& from, const std::vector<int>& to,
                                       int width) {
    expect(!to.empty(), "nn_distances: empty target set");
    std::vector<double> out(from.size());
    for (size_t i = 0; i < from.size(); ++i) {
        int fx = from[i] % width, fy = from[i] / width;
        long best = std::numeric_limits<long>::max();
        for (int t : to) {
            long dx = t % width - fx, dy = t / width - fy;
            best = std::min(best, dx * dx + dy * dy);
        }
        out[i] = std::sqrt(static_cast<double>(best));
    }
    return out;
}

namespace {

// 1-D squared distance transform (lower envelope of parabolas).
void dt_1d(std::vector<double>& f, int n, std::vector<int>& v, std::vector<double>& z,
           std::vector<double>& d) {
    int k = 0;
    v[0] = 0;
    z[0] = -1e30;
    z[1] = 1e30;
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            s = ((f[q] + static_cast<double>(q) * q) -
                 (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                (2.0 * q - 2.0 * v[k]);
            if (s <= z[k] && k > 0)
                --k;
            else
                break;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = 1e30;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
    std::copy(d.begin(), d.begin() + n, f.begin());
}

} // namespace

std::vector<double> nn_distances_edt(const std::vector<int>& from, const std::vector<int>& to,
                                     int width, int height) {
    expect(!to.empty(), "nn_distances: empty target set");
    constexpr double kFar = 1e12; // finite so parabola intersections stay well-defined
    std::vector<double> grid(static_cast<size_t>(width) * height, kFar);
    for (int t : to) grid[t] = 0.0;

    int n = std::max(width, height);
    std::vector<int> v(n);
    std::vector<double> z(n + 1), d(n), col(height);
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) col[y] = grid[static_cast<size_t>(y) * width + x];
        dt_1d(col, height, v, z, d);
        for (int y = 0; y < height; ++y) grid[static_cast<size_t>(y) * width + x] = col[y];
    }
    std::vector<double> row(width);
    for (int y = 0; y < height; ++y) {
        double* r = &grid[static_cast<size_t>(y) * width];
        std::copy(r, r + width, row.begin());
        dt_1d(row, width, v, z, d);
        std::copy(row.begin(), row.end(), r);
    }

    std::vector<double> out(from.size());
    for (size_t i = 0; i < from.size(); ++i) out[i] = std::sqrt(std::round(grid[from[i]]));
    return out;
}

std::vector<double> nn_distances(const std::vector<int>& from, const std::vector<int>& to,
                                 int width, int height) {
    if (static_cast<int>(std::max(from.size(), to.size())) < kBruteForceLimit)
        return nn_distances_brute(from, to, width);
    return nn_distances_edt(from, to, width, height);
}

double asd_of(const SurfaceDistances& d) {
    expect(!d.d_ml.empty() || !d.d_ref.empty(), "asd: no boundary distances");
    double sum = 0.0;
    for (double v : d.d_ml) sum += v;
    for (double v : d.d_ref) sum += v;
    return sum / (d.d_ml.size() + d.d_ref.size());
}

double nsd_of(const SurfaceDistances& d, double tau) {
    expect(tau >= 0.0, "nsd: negative threshold");
    expect(!d.d_ml.empty() || !d.d_ref.empty(), "nsd: no boundary distances");
    size_t kept = 0;
    for (double v : d.d_ml) kept += v <= tau;
    for (double v : d.d_ref) kept += v <= tau;
    return static_cast<double>(kept) / (d.d_ml.size() + d.d_ref.size());
}

namespace {

// Class mask restricted to pixels not ignored in the reference.
std::vector<uint8_t> class_mask(const LabelMap& map, const LabelMap& ref, int cls) {
    std::vector<uint8_t> mask(map.labels.size(), 0);
    for (size_t p = 0; p < map.labels.size(); ++p)
        mask[p] = ref.labels[p] != kIgnoreLabel && map.labels[p] == cls;
    return mask;
}

size_t mask_count(const std::vector<uint8_t>& m) {
    return static_cast<size_t>(std::count(m.begin(), m.end(), uint8_t(1)));
}

void check_pair(const LabelMap& pred, const LabelMap& ref) {
    expect(pred.width == ref.width && pred.height == ref.height,
           "metrics: prediction/reference dimension mismatch");
}

} // namespace

double dsc(const LabelMap& pred, const LabelMap& ref, int cls) {
    check_pair(pred, ref);
    std::vector<uint8_t> p = class_mask(pred, ref, cls);
    std::vector<uint8_t> r = class_mask(ref, ref, cls);
    size_t nr = mask_count(r);
    expect(nr > 0, "dsc: class " + std::to_string(cls) + " not annotated in the reference");
    size_t np = 0, both = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        np += p[i];
        both += p[i] && r[i];
    }
    return 2.0 * both / (np + nr);
}

SurfaceDistances surface_distances(const LabelMap& pred, const LabelMap& ref, int cls) {
    check_pair(pred, ref);
    std::vector<uint8_t> p = class_mask(pred, ref, cls);
    std::vector<uint8_t> r = class_mask(ref, ref, cls);
    expect(mask_count(r) > 0, "surface_distances: class not annotated in the reference");
    expect(mask_count(p) > 0, "surface_distances: class not predicted");
    std::vector<int> bp = boundary(p, pred.width, pred.height);
    std::vector<int> br = boundary(r, ref.width, ref.height);
    SurfaceDistances d;
    d.d_ml = nn_distances(bp, br, pred.width, pred.height);
    d.d_ref = nn_distances(br, bp, pred.width, pred.height);
    return d;
}

std::optional<double> asd(const LabelMap& pred, const LabelMap& ref, int cls) {
    check_pair(pred, ref);
    std::vector<uint8_t> r = class_mask(ref, ref, cls);
    expect(mask_count(r) > 0, "asd: class " + std::to_string(cls) + " not annotated in the reference");
    if (mask_count(class_mask(pred, ref, cls)) == 0) return std::nullopt;
    return asd_of(surface_distances(pred, ref, cls));
}

double nsd(const LabelMap& pred, const LabelMap& ref, int cls, double tau) {
    check_pair(pred, ref);
    expect(tau >= 0.0, "nsd: negative threshold");
    std::vector<uint8_t> r = class_mask(ref, ref, cls);
    expect(mask_count(r) > 0, "nsd: class " + std::to_string(cls) + " not annotated in the reference");
    if (mask_count(class_mask(pred, ref, cls)) == 0) return 0.0;
    return nsd_of(surface_distances(pred, ref, cls), tau);
}

bool ThresholdTable::defined(int cls) const {
    return cls >= 0 && cls < static_cast<int>(tau.size()) && !std::isnan(tau[cls]);
}

nlohmann::json ThresholdTable::to_json() const {
    nlohmann::json per_class = nlohmann::json::array();
    for (size_t o = 0; o < tau.size(); ++o) {
        nlohmann::json row{{"class", o}, {"support", support[o]}};
        if (std::isnan(tau[o]))
            row["tau"] = nullptr;
        else
            row["tau"] = tau[o];
        per_class.push_back(row);
    }
    return {{"thresholds", per_class}};
}

ThresholdTable ThresholdTable::from_json(const nlohmann::json& j) {
    ThresholdTable t;
    for (const auto& row : j.at("thresholds")) {
        t.tau.push_back(row.at("tau").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                : row.at("tau").get<double>());
        t.support.push_back(row.at("support").get<int>());
    }
    return t;
}

namespace {

// Copy of `m` with every pixel ignored in either annotation set to IGNORE.
LabelMap apply_ignore_union(const LabelMap& m, const LabelMap& a, const LabelMap& b) {
    LabelMap out = m;
    for (size_t p = 0; p < out.labels.size(); ++p)
        if (a.labels[p] == kIgnoreLabel || b.labels[p] == kIgnoreLabel)
            out.labels[p] = kIgnoreLabel;
    return out;
}

std::set<int> present_classes(const LabelMap& m) {
    std::set<int> out;
    for (uint8_t v : m.labels)
        if (v != kIgnoreLabel) out.insert(v);
    return out;
}

double aggregate_tau(std::vector<double>& vals, TauAggregate agg) {
    std::sort(vals.begin(), vals.end());
    size_t n = vals.size();
    switch (agg) {
        case TauAggregate::Mean: {
            double s = 0.0;
            for (double v : vals) s += v;
            return s / n;
        }
        case TauAggregate::Median:
            return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
        case TauAggregate::Q95: {
            size_t idx = static_cast<size_t>(std::ceil(0.95 * n));
            return vals[std::min(idx == 0 ? 0 : idx - 1, n - 1)];
        }
    }
    throw ConfigError("unknown tau aggregation");
}

} // namespace

ThresholdTable estimate_thresholds(const std::vector<LabelMap>& ann_a,
                                   const std::vector<LabelMap>& ann_b, int num_classes,
                                   TauAggregate agg) {
    expect(ann_a.size() == ann_b.size(), "estimate_thresholds: unpaired annotations");
    expect(!ann_a.empty(), "estimate_thresholds: no annotation pairs");
    expect(num_classes > 0, "estimate_thresholds: num_classes must be positive");

    std::vector<std::vector<double>> per_class(num_classes);
    for (size_t i = 0; i < ann_a.size(); ++i) {
        check_pair(ann_a[i], ann_b[i]);
        LabelMap a = apply_ignore_union(ann_a[i], ann_a[i], ann_b[i]);
        LabelMap b = apply_ignore_union(ann_b[i], ann_a[i], ann_b[i]);
        std::set<int> ca = present_classes(a), cb = present_classes(b);
        for (int o : ca) {
            if (!cb.count(o)) continue; // co-annotation rule
            expect(o < num_classes, "estimate_thresholds: label id out of range");
            per_class[o].push_back(asd_of(surface_distances(b, a, o)));
        }
    }

    ThresholdTable t;
    t.tau.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
    t.support.assign(num_classes, 0);
    for (int o = 0; o < num_classes; ++o) {
        t.support[o] = static_cast<int>(per_class[o].size());
        if (!per_class[o].empty()) t.tau[o] = aggregate_tau(per_class[o], agg);
    }
    return t;
}

namespace {

double mean_field(const std::vector<ImageClassMetrics>& xs, double ImageClassMetrics::*field) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (const ImageClassMetrics& x : xs) s += x.*field;
    return s / xs.size();
}

} // namespace

double ImageEval::mean_dsc() const { return mean_field(classes, &ImageClassMetrics::dsc); }
double ImageEval::mean_asd() const { return mean_field(classes, &ImageClassMetrics::asd); }
double ImageEval::mean_nsd() const { return mean_field(classes, &ImageClassMetrics::nsd); }

ImageEval evaluate_image(const LabelMap& pred, const LabelMap& ref, const ThresholdTable& tau) {
    check_pair(pred, ref);
    ImageEval out;
    std::set<int> classes = present_classes(ref);
    if (classes.empty()) {
        out.excluded = true;
        out.note = "reference contains no annotated class";
        return out;
    }

    double max_asd = 0.0;
    bool any_present = false;
    for (int o : classes) {
        expect(tau.defined(o), "evaluate_image: no threshold for class " + std::to_string(o));
        ImageClassMetrics m;
        m.cls = o;
        m.dsc = dsc(pred, ref, o);
        std::optional<double> a = asd(pred, ref, o);
        if (a) {
            m.asd = *a;
            m.nsd = nsd(pred, ref, o, tau.tau[o]);
            max_asd = std::max(max_asd, m.asd);
            any_present = true;
        } else {
            m.missing = true;
        }
        out.classes.push_back(m);
    }

    if (!any_present) {
        out.classes.clear();
        out.excluded = true;
        out.note = "no annotated class was predicted";
        return out;
    }
    for (ImageClassMetrics& m : out.classes)
        if (m.missing) m.asd = max_asd; // placeholder: worst ASD on this image
    return out;
}

MetricReport aggregate(const std::vector<EvalItem>& items) {
    expect(!items.empty(), "aggregate: no evaluated images");

    struct Acc {
        double dsc = 0.0, asd = 0.0, nsd = 0.0;
        int n = 0;
        void add(double d, double a, double s) {
            dsc += d;
            asd += a;
            nsd += s;
            ++n;
        }
    };
    std::map<std::string, Acc> by_subject;
    std::map<std::pair<std::string, int>, Acc> by_subject_class;
    MetricReport report;

    for (const EvalItem& item : items) {
        if (item.eval.excluded) {
            report.excluded.push_back(item.subject + "/" + item.image + ": " + item.eval.note);
            continue;
        }
        by_subject[item.subject].add(item.eval.mean_dsc(), item.eval.mean_asd(),
                                     item.eval.mean_nsd());
        for (const ImageClassMetrics& m : item.eval.classes)
            by_subject_class[{item.subject, m.cls}].add(m.dsc, m.asd, m.nsd);
    }
    expect(!by_subject.empty(), "aggregate: every image was excluded");

    double sd = 0.0, sa = 0.0, sn = 0.0;
    for (const auto& [subject, acc] : by_subject) {
        MetricReport::SubjectRow row;
        row.subject = subject;
        row.images = acc.n;
        row.dsc = acc.dsc / acc.n;
        row.asd = acc.asd / acc.n;
        row.nsd = acc.nsd / acc.n;
        sd += row.dsc;
        sa += row.asd;
        sn += row.nsd;
        report.subjects.push_back(row);
    }
    for (const auto& [key, acc] : by_subject_class) {
        MetricReport::SubjectClassRow row;
        row.subject = key.first;
        row.cls = key.second;
        row.images = acc.n;
        row.dsc = acc.dsc / acc.n;
        row.asd = acc.asd / acc.n;
        row.nsd = acc.nsd / acc.n;
        report.subject_classes.push_back(row);
    }

    size_t n = report.subjects.size();
    report.dsc_mean = sd / n;
    report.asd_mean = sa / n;
    report.nsd_mean = sn / n;
    if (n > 1) {
        double vd = 0.0, va = 0.0, vn = 0.0;
        for (const auto& row : report.subjects) {
            vd += (row.dsc - report.dsc_mean) * (row.dsc - report.dsc_mean);
            va += (row.asd - report.asd_mean) * (row.asd - report.asd_mean);
            vn += (row.nsd - report.nsd_mean) * (row.nsd - report.nsd_mean);
        }
        report.dsc_sd = std::sqrt(vd / (n - 1));
        report.asd_sd = std::sqrt(va / (n - 1));
        report.nsd_sd = std::sqrt(vn / (n - 1));
    }
    return report;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json subj = nlohmann::json::array();
    for (const SubjectRow& r : subjects)
        subj.push_back({{"subject", r.subject},
                        {"images", r.images},
                        {"dsc", r.dsc},
                        {"asd", r.asd},
                        {"nsd", r.nsd}});
    nlohmann::json cls = nlohmann::json::array();
    for (const SubjectClassRow& r : subject_classes)
        cls.push_back({{"subject", r.subject},
                       {"class", r.cls},
                       {"images", r.images},
                       {"dsc", r.dsc},
                       {"asd", r.asd},
                       {"nsd", r.nsd}});
    return {{"subjects", subj},
            {"subject_classes", cls},
            {"cohort",
             {{"dsc", {{"mean", dsc_mean}, {"sd", dsc_sd}}},
              {"asd", {{"mean", asd_mean}, {"sd", asd_sd}}},
              {"nsd", {{"mean", nsd_mean}, {"sd", nsd_sd}}}}},
            {"excluded", excluded}};
}

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out << "subject,class,metric,value\n";
    for (const SubjectClassRow& r : subject_classes) {
        out << r.subject << "," << r.cls << ",dsc," << fmt(r.dsc) << "\n";
        out << r.subject << "," << r.cls << ",asd," << fmt(r.asd) << "\n";
        out << r.subject << "," << r.cls << ",nsd," << fmt(r.nsd) << "\n";
    }
    for (const SubjectRow& r : subjects) {
        out << r.subject << ",all,dsc," << fmt(r.dsc) << "\n";
        out << r.subject << ",all,asd," << fmt(r.asd) << "\n";
        out << r.subject << ",all,nsd," << fmt(r.nsd) << "\n";
    }
    out << "cohort,all,dsc," << fmt(dsc_mean) << "\n";
    out << "cohort,all,dsc_sd," << fmt(dsc_sd) << "\n";
    out << "cohort,all,asd," << fmt(asd_mean) << "\n";
    out << "cohort,all,asd_sd," << fmt(asd_sd) << "\n";
    out << "cohort,all,nsd," << fmt(nsd_mean) << "\n";
    out << "cohort,all,nsd_sd," << fmt(nsd_sd) << "\n";
    return out.str();
}

Confusion::Confusion(int num_classes) : classes_(num_classes) {
    expect(num_classes > 0, "confusion: num_classes must be positive");
}

void Confusion::add(const std::string& subject, const LabelMap& pred, const LabelMap& ref) {
    check_pair(pred, ref);
    auto [it, fresh] = counts_.try_emplace(subject);
    if (fresh) it->second.assign(static_cast<size_t>(classes_) * classes_, 0.0);
    for (size_t p = 0; p < ref.labels.size(); ++p) {
        uint8_t r = ref.labels[p], q = pred.labels[p];
        if (r == kIgnoreLabel || q == kIgnoreLabel) continue;
        expect(r < classes_ && q < classes_, "confusion: label id out of range");
        it->second[static_cast<size_t>(r) * classes_ + q] += 1.0;
    }
}

Confusion::Result Confusion::result() const {
    expect(!counts_.empty(), "confusion: no image pairs added");
    Confusion::Result res;
    res.matrix.assign(static_cast<size_t>(classes_) * classes_,
                      std::numeric_limits<double>::quiet_NaN());
    res.support.assign(classes_, 0);

    std::vector<double> sums(static_cast<size_t>(classes_) * classes_, 0.0);
    for (const auto& [subject, counts] : counts_) {
        for (int r = 0; r < classes_; ++r) {
            double total = 0.0;
            for (int c = 0; c < classes_; ++c) total += counts[static_cast<size_t>(r) * classes_ + c];
            if (total == 0.0) continue; // row absent for this subject
            for (int c = 0; c < classes_; ++c)
                sums[static_cast<size_t>(r) * classes_ + c] +=
                    counts[static_cast<size_t>(r) * classes_ + c] / total;
            ++res.support[r];
        }
    }
    for (int r = 0; r < classes_; ++r) {
        if (res.support[r] == 0) continue;
        for (int c = 0; c < classes_; ++c)
            res.matrix[static_cast<size_t>(r) * classes_ + c] =
                sums[static_cast<size_t>(r) * classes_ + c] / res.support[r];
    }
    return res;
}

AgreementResult rater_agreement(const LabelMap& ann_a, const LabelMap& ann_b,
                                const ThresholdTable& tau) {
    check_pair(ann_a, ann_b);
    LabelMap a = apply_ignore_union(ann_a, ann_a, ann_b);
    LabelMap b = apply_ignore_union(ann_b, ann_a, ann_b);

    std::set<int> ca = present_classes(a), cb = present_classes(b);
    AgreementResult out;
    for (int o : cb)
        if (!ca.count(o)) ++out.newly_appearing;
    for (int o : ca)
        if (!cb.count(o)) ++out.vanished;
    out.eval = evaluate_image(b, a, tau);
    return out;
}

} // namespace spectraseg
