#include "segref/metrics.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "segref/errors.hpp"

namespace segref {

using nlohmann::ordered_json;

namespace {

double ratio(long num, long den, double when_zero_over_zero) {
    if (den == 0) return num == 0 ? when_zero_over_zero : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricReport evaluate(const std::vector<ImagePair>& pairs) {
    if (pairs.empty()) {
        throw ValidationError("metric evaluation needs at least one image pair");
    }
    MetricReport report;
    long total_i = 0;
    long total_u = 0;
    double sum_iou = 0.0, sum_pr = 0.0, sum_rec = 0.0, sum_dice = 0.0;
    for (const auto& pair : pairs) {
        OverlapStats stats = overlap_stats(pair.predicted, pair.truth);
        PerImageMetrics m;
        m.intersection_px = stats.intersection_px;
        m.union_px = stats.union_px;
        m.pred_px = stats.a_px;
        m.gt_px = stats.b_px;
        m.iou = ratio(m.intersection_px, m.union_px, 1.0);
        m.precision = ratio(m.intersection_px, m.pred_px, m.gt_px == 0 ? 1.0 : 0.0);
        m.recall = ratio(m.intersection_px, m.gt_px, m.pred_px == 0 ? 1.0 : 0.0);
        m.dice = ratio(2 * m.intersection_px, m.pred_px + m.gt_px, 1.0);
        total_i += m.intersection_px;
        total_u += m.union_px;
        sum_iou += m.iou;
        sum_pr += m.precision;
        sum_rec += m.recall;
        sum_dice += m.dice;
        report.per_image.push_back(m);
    }
    double n = static_cast<double>(pairs.size());
    report.g_iou = sum_iou / n;
    report.c_iou = ratio(total_i, total_u, 1.0);
    report.m_precision = sum_pr / n;
    report.m_recall = sum_rec / n;
    report.m_dice = sum_dice / n;
    return report;
}

std::string MetricReport::to_json() const {
    ordered_json doc;
    doc["gIoU"] = g_iou;
    doc["cIoU"] = c_iou;
    doc["mPr"] = m_precision;
    doc["mRec"] = m_recall;
    doc["mDice"] = m_dice;
    auto images = ordered_json::array();
    for (const auto& m : per_image) {
        ordered_json row;
        row["intersection_px"] = m.intersection_px;
        row["union_px"] = m.union_px;
        row["pred_px"] = m.pred_px;
        row["gt_px"] = m.gt_px;
        row["iou"] = m.iou;
        row["precision"] = m.precision;
        row["recall"] = m.recall;
        row["dice"] = m.dice;
        images.push_back(std::move(row));
    }
    doc["per_image"] = std::move(images);
    return doc.dump(2) + "\n";
}

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out << "image,intersection_px,union_px,pred_px,gt_px,iou,precision,recall,dice\n";
    for (std::size_t i = 0; i < per_image.size(); ++i) {
        const auto& m = per_image[i];
        out << i << ',' << m.intersection_px << ',' << m.union_px << ',' << m.pred_px
            << ',' << m.gt_px << ',' << m.iou << ',' << m.precision << ',' << m.recall
            << ',' << m.dice << '\n';
    }
    out << "summary,,,,," << g_iou << ',' << m_precision << ',' << m_recall << ','
        << m_dice << '\n';
    return out.str();
}

void CostLedger::append(CostEntry entry) {
    if (entry.input_tokens < 0 || entry.output_tokens < 0) {
        throw ValidationError("token counts must be nonnegative");
    }
    std::lock_guard<std::mutex> lock(mutex_);
    entries_.push_back(std::move(entry));
}

std::vector<CostEntry> CostLedger::entries() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_;
}

std::size_t CostLedger::size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
}

double cost_total(const CostLedger& ledger) {
    double total = 0.0;
    const PriceConfig& price = ledger.price();
    for (const auto& e : ledger.entries()) {
        total += e.input_tokens / 1e6 * price.usd_per_m_input +
                 e.output_tokens / 1e6 * price.usd_per_m_output;
    }
    return total;
}

LedgerSummary ledger_summary(const CostLedger& ledger) {
    LedgerSummary summary;
    std::vector<long> latencies;
    for (const auto& e : ledger.entries()) {
        summary.calls += 1;
        summary.input_tokens += e.input_tokens;
        summary.output_tokens += e.output_tokens;
        latencies.push_back(e.latency_ms);
    }
    if (!latencies.empty()) {
        std::sort(latencies.begin(), latencies.end());
        std::size_t mid = latencies.size() / 2;
        summary.median_latency_ms = latencies.size() % 2 == 1
                                        ? latencies[mid]
                                        : (latencies[mid - 1] + latencies[mid]) / 2;
    }
    summary.cost_usd = cost_total(ledger);
    return summary;
}

std::string LedgerSummary::to_json() const {
    ordered_json doc;
    doc["calls"] = calls;
    doc["input_tokens"] = input_tokens;
    doc["output_tokens"] = output_tokens;
    doc["median_latency_ms"] = median_latency_ms;
    doc["cost_usd"] = cost_usd;
    return doc.dump(2) + "\n";
}

}  // namespace segref
