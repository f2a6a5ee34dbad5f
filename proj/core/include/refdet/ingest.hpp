#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refdet/log_miner.hpp"
#include "refdet/tensor.hpp"

namespace refdet {

enum class Modality { TimeSeries, Tabular, Log };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Raw inputs as loaded from disk, before preparation.
struct RawTimeSeries {
    MatD values;                       // L x d_raw
    std::vector<uint8_t> point_labels; // empty when unlabeled, else length L
};

struct RawTable {
    std::vector<std::vector<double>> rows; // row i has F_i features
    std::vector<uint8_t> row_labels;
};

struct RawLog {
    std::vector<std::string> lines;
    std::vector<uint8_t> line_labels;
};

/// The unit of detection. Payload lives in `matrix` for time-series patches
/// (p x d_raw) and tabular rows (1 x F'), in `ids` for log windows (length w).
struct Sample {
    Modality modality = Modality::Tabular;
    MatD matrix;
    std::vector<int32_t> ids;
    uint8_t label = 0;
    std::string dataset_id;
};

/// Preparation parameters from the manifest. stride == 0 means stride = p.
struct PrepParams {
    int p = 16;
    int stride = 0;
    int f_prime = 8;
    int w = 16;
};

/// Per-dataset constants persisted alongside the prepared samples.
struct DatasetStats {
    std::vector<double> channel_std;        // time: train-split std per channel
    std::vector<double> feat_min, feat_max; // tabular: train-split scaling constants
    int inventory_size = 0;                 // log: train-time template inventory size
};

/// A fully prepared dataset: the task-level unit the trainer and scorer see.
struct DatasetHandle {
    std::string dataset_id;
    Modality modality = Modality::Tabular;
    std::vector<Sample> train_normals;
    std::vector<Sample> train_anomalies;
    std::vector<Sample> test;
    double size_points = 0; // train sample count, drives the sampling scheduler
    DatasetStats stats;
    PrepParams prep;
};

/// Dataset manifest: what to load and how to prepare it.
struct Manifest {
    std::string dataset_id;
    Modality modality = Modality::Tabular;
    std::string data_path;            // resolved against the manifest directory
    std::optional<std::string> label_path;
    double train_frac = 0.5;
    PrepParams prep;
};

Manifest load_manifest(const std::string& path);

// ---- preparation primitives -------------------------------------------------

/// Segments a series into patches of p rows taken every `stride` rows; the
/// trailing remainder shorter than p is dropped. A patch is labeled anomalous
/// iff it covers at least one anomalous point.
std::vector<Sample> patch_time_series(const RawTimeSeries& raw, int p, int stride,
                                      const std::string& dataset_id = {});

/// Zero-pads or truncates a row to width f_prime.
Sample pad_truncate_row(const std::vector<double>& row, int f_prime,
                        const std::string& dataset_id = {});

/// Non-overlapping windows of w consecutive template ids; the remainder is
/// dropped. Window label inherits from any anomalous covered line.
std::vector<Sample> window_logs(const std::vector<int32_t>& template_ids, int w,
                                const std::vector<uint8_t>& line_labels = {},
                                const std::string& dataset_id = {});

// ---- loading ------------------------------------------------------------------

/// Loads and prepares datasets from manifests. Log datasets within one loader
/// share a single template miner: all train splits are mined first (fixing the
/// inventory the encoder embeds), then test splits, which may still grow the
/// inventory for downstream rare-bucket mapping.
class DatasetLoader {
public:
    DatasetLoader();
    /// Seeds the miner from a persisted inventory; its size becomes the frozen
    /// train-inventory size (checkpoint-compatible evaluation of unseen logs).
    explicit DatasetLoader(const std::string& inventory_path);

    std::vector<DatasetHandle> load_all(const std::vector<std::string>& manifest_paths);

    const TemplateMiner& miner() const { return miner_; }
    int train_inventory_size() const { return train_inventory_size_; }
    void save_inventory(const std::string& path) const { miner_.save_inventory(path); }

private:
    TemplateMiner miner_;
    int train_inventory_size_ = 0;
    bool frozen_inventory_ = false;
};

/// One-shot convenience: loads a single dataset with its own template miner.
DatasetHandle load_dataset(const std::string& manifest_path);

// ---- prepared-dataset persistence ----------------------------------------------

void save_prepared(const DatasetHandle& handle, const std::string& path);
DatasetHandle load_prepared(const std::string& path);

// ---- raw file readers (shared with synth output) ---------------------------------

std::vector<std::vector<double>> read_numeric_rows(const std::string& path);
std::vector<std::string> read_text_lines(const std::string& path);
std::vector<uint8_t> read_label_lines(const std::string& path);

} // namespace refdet
