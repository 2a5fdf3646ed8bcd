#pragma once

#include <mutex>
#include <string>
#include <vector>

#include "segref/geometry.hpp"

namespace segref {

// Predicted and ground-truth class masks for one image (class mask = union of
// instance masks). Dimensions must match.
struct ImagePair {
    BinaryMask predicted;
    BinaryMask truth;
};

struct PerImageMetrics {
    long intersection_px = 0;
    long union_px = 0;
    long pred_px = 0;
    long gt_px = 0;
    double iou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double dice = 0.0;
};

struct MetricReport {
    double g_iou = 0.0;   // mean of per-image IoUs
    double c_iou = 0.0;   // cumulative intersection over cumulative union
    double m_precision = 0.0;
    double m_recall = 0.0;
    double m_dice = 0.0;
    std::vector<PerImageMetrics> per_image;

    std::string to_json() const;
    // One row per image plus a summary row.
    std::string to_csv() const;
};

// Empty/empty cases score 1 (correctly predicting absence is perfect); an
// empty prediction against a nonempty ground truth scores 0.
MetricReport evaluate(const std::vector<ImagePair>& pairs);

struct PriceConfig {
    double usd_per_m_input = 0.30;
    double usd_per_m_output = 2.50;

    bool operator==(const PriceConfig&) const = default;
};

struct CostEntry {
    std::string role;
    long input_tokens = 0;
    long output_tokens = 0;
    long latency_ms = 0;
};

// Per-call token accounting. Appends may arrive from concurrent crops; the
// ledger serializes them.
class CostLedger {
public:
    CostLedger() = default;
    explicit CostLedger(PriceConfig price) : price_(price) {}

    void append(CostEntry entry);
    std::vector<CostEntry> entries() const;
    std::size_t size() const;
    const PriceConfig& price() const { return price_; }

private:
    mutable std::mutex mutex_;
    std::vector<CostEntry> entries_;
    PriceConfig price_;
};

double cost_total(const CostLedger& ledger);

struct LedgerSummary {
    long calls = 0;
    long input_tokens = 0;
    long output_tokens = 0;
    long median_latency_ms = 0;  // 0 when the ledger is empty
    double cost_usd = 0.0;

    std::string to_json() const;
};

LedgerSummary ledger_summary(const CostLedger& ledger);

}  // namespace segref
