#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spectraseg/cube.hpp"

namespace spectraseg {

// --- boundaries and surface distances ------------------------------------------

// Pixels of the mask (0/1 bytes, row-major) with at least one 4-neighbor
// outside it; the image edge counts as outside. Returns indices y*width+x.
std::vector<int> boundary(const std::vector<uint8_t>& mask, int width, int height);

// Nearest-neighbor Euclidean distance from every pixel of `from` to the
// closest pixel of `to`. Brute force for small sets, exact distance
// transform for large ones; the two agree exactly.
std::vector<double> nn_distances(const std::vector<int>& from, const std::vector<int>& to,
                                 int width, int height);
std::vector<double> nn_distances_brute(const std::vector<int>& from, const std::vector<int>& to,
                                       int width);
std::vector<double> nn_distances_edt(const std::vector<int>& from, const std::vector<int>& to,
                                     int width, int height);

// Boundary-pixel count above which nn_distances switches to the transform.
inline constexpr int kBruteForceLimit = 10000;

// D_ML (prediction boundary -> reference boundary) and D_REF (the reverse).
struct SurfaceDistances {
    std::vector<double> d_ml;
    std::vector<double> d_ref;
};

double asd_of(const SurfaceDistances& d);                // Eq. 1
double nsd_of(const SurfaceDistances& d, double tau);    // Eqs. 2-3

// --- per-class metrics ----------------------------------------------------------

// All three exclude pixels that are IGNORE in the reference from both masks
// and require the class to be annotated in the reference.
double dsc(const LabelMap& pred, const LabelMap& ref, int cls);

// nullopt when the class was not predicted; the caller resolves the
// image-level placeholder (max ASD of the other classes).
std::optional<double> asd(const LabelMap& pred, const LabelMap& ref, int cls);

double nsd(const LabelMap& pred, const LabelMap& ref, int cls, double tau);

SurfaceDistances surface_distances(const LabelMap& pred, const LabelMap& ref, int cls);

// --- organ-specific NSD thresholds (Eq. 4) --------------------------------------

enum class TauAggregate { Mean, Median, Q95 };

struct ThresholdTable {
    std::vector<double> tau; // per class, NaN when never co-annotated
    std::vector<int> support; // images contributing to each class

    bool defined(int cls) const;
    nlohmann::json to_json() const;
    static ThresholdTable from_json(const nlohmann::json& j);
};

// Inter-rater threshold estimation over annotation pairs: tau_i^o is the
// symmetric mean boundary distance for class o in pair i (union of ignored
// pixels removed); classes present in only one annotation of a pair are
// skipped for that pair.
ThresholdTable estimate_thresholds(const std::vector<LabelMap>& ann_a,
                                   const std::vector<LabelMap>& ann_b, int num_classes,
                                   TauAggregate agg = TauAggregate::Mean);

// --- image evaluation and aggregation -------------------------------------------

struct ImageClassMetrics {
    int cls = 0;
    double dsc = 0.0;
    double asd = 0.0;
    double nsd = 0.0;
    bool missing = false; // annotated but not predicted
};

struct ImageEval {
    std::vector<ImageClassMetrics> classes; // one entry per annotated class
    bool excluded = false;                  // nothing evaluable on this image
    std::string note;                       // diagnostic when excluded

    double mean_dsc() const;
    double mean_asd() const;
    double mean_nsd() const;
};

// Evaluates every class annotated in the reference. Missing classes score
// DSC/NSD 0 and take the maximum ASD of the predicted classes on the same
// image; when no class is predicted the image is excluded with a note.
ImageEval evaluate_image(const LabelMap& pred, const LabelMap& ref, const ThresholdTable& tau);

struct EvalItem {
    std::string subject;
    std::string image;
    ImageEval eval;
};

struct MetricReport {
    struct SubjectRow {
        std::string subject;
        int images = 0;
        double dsc = 0.0, asd = 0.0, nsd = 0.0;
    };
    struct SubjectClassRow {
        std::string subject;
        int cls = 0;
        int images = 0;
        double dsc = 0.0, asd = 0.0, nsd = 0.0;
    };

    std::vector<SubjectRow> subjects;
    std::vector<SubjectClassRow> subject_classes;
    double dsc_mean = 0.0, dsc_sd = 0.0;
    double asd_mean = 0.0, asd_sd = 0.0;
    double nsd_mean = 0.0, nsd_sd = 0.0;
    std::vector<std::string> excluded; // "subject/image: note"

    nlohmann::json to_json() const;
    std::string to_csv() const; // subject,class,metric,value (class "all" = image-mean path)
};

// class-mean per image -> image-mean per subject -> cohort mean and SD
// across subjects (sample SD; 0 for a single subject).
MetricReport aggregate(const std::vector<EvalItem>& items);

// --- confusion matrices ----------------------------------------------------------

class Confusion {
public:
    explicit Confusion(int num_classes);

    void add(const std::string& subject, const LabelMap& pred, const LabelMap& ref);

    struct Result {
        std::vector<double> matrix; // O*O row-major; NaN rows were never observed
        std::vector<int> support;   // subjects contributing to each row
    };
    // Per-subject row-normalized matrices averaged entry-wise, skipping rows
    // a subject never observed.
    Result result() const;

private:
    int classes_;
    std::map<std::string, std::vector<double>> counts_;
};

// --- rater agreement --------------------------------------------------------------

struct AgreementResult {
    ImageEval eval;          // second annotation scored against the first
    int newly_appearing = 0; // classes only in the second annotation
    int vanished = 0;        // classes only in the first
};

// Pixels ignored in either annotation are removed from both before scoring.
AgreementResult rater_agreement(const LabelMap& ann_a, const LabelMap& ann_b,
                                const ThresholdTable& tau);

} // namespace spectraseg
