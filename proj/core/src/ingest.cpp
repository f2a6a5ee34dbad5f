#include "refdet/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "refdet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace refdet {

std::string to_string(Modality m) {
    switch (m) {
        case Modality::TimeSeries: return "time";
        case Modality::Tabular: return "tabular";
        case Modality::Log: return "log";
    }
    return "?";
}

Modality modality_from_string(const std::string& s) {
    if (s == "time") return Modality::TimeSeries;
    if (s == "tabular") return Modality::Tabular;
    if (s == "log") return Modality::Log;
    throw ConfigError("unknown modality: " + s);
}

namespace {

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& context) {
    for (const auto& [key, _] : obj.items())
        if (!allowed.contains(key))
            throw ConfigError("unknown key '" + key + "' in " + context);
}

std::string resolve(const std::string& base_file, const std::string& rel) {
    const fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(base_file).parent_path() / p).string();
}

uint8_t window_label(const std::vector<uint8_t>& labels, size_t first, size_t count) {
    if (labels.empty()) return 0;
    for (size_t i = first; i < first + count; ++i)
        if (labels[i] != 0) return 1;
    return 0;
}

} // namespace

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed manifest " + path + ": " + e.what());
    }
    reject_unknown_keys(j, {"dataset_id", "modality", "data_path", "label_path", "split", "prep"},
                        "manifest " + path);
    for (const char* key : {"dataset_id", "modality", "data_path"})
        if (!j.contains(key))
            throw ConfigError("manifest " + path + " missing required key '" + key + "'");

    Manifest m;
    m.dataset_id = j["dataset_id"].get<std::string>();
    m.modality = modality_from_string(j["modality"].get<std::string>());
    m.data_path = resolve(path, j["data_path"].get<std::string>());
    if (j.contains("label_path"))
        m.label_path = resolve(path, j["label_path"].get<std::string>());
    if (j.contains("split")) {
        reject_unknown_keys(j["split"], {"train_frac"}, "manifest split");
        m.train_frac = j["split"].value("train_frac", 0.5);
        if (!(m.train_frac >= 0.0 && m.train_frac <= 1.0))
            throw ConfigError("train_frac must lie in [0,1]");
    }
    if (j.contains("prep")) {
        reject_unknown_keys(j["prep"], {"p", "stride", "f_prime", "w"}, "manifest prep");
        const json& p = j["prep"];
        m.prep.p = p.value("p", m.prep.p);
        m.prep.stride = p.value("stride", m.prep.stride);
        m.prep.f_prime = p.value("f_prime", m.prep.f_prime);
        m.prep.w = p.value("w", m.prep.w);
    }
    return m;
}

// ---- preparation primitives -------------------------------------------------

std::vector<Sample> patch_time_series(const RawTimeSeries& raw, int p, int stride,
                                      const std::string& dataset_id) {
    const auto L = raw.values.rows();
    if (L < 1 || raw.values.cols() < 1) throw DataError("patch_time_series: empty series");
    if (p < 1 || p > L)
        throw DataError("patch_time_series: patch length " + std::to_string(p) +
                        " exceeds series length " + std::to_string(L));
    if (stride < 1) throw DataError("patch_time_series: stride must be >= 1");
    if (!raw.point_labels.empty() && static_cast<Eigen::Index>(raw.point_labels.size()) != L)
        throw DataError("patch_time_series: label length mismatch");
    if (!raw.values.allFinite()) throw DataError("patch_time_series: non-finite values");

    const int n = static_cast<int>((L - p) / stride) + 1;
    std::vector<Sample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.modality = Modality::TimeSeries;
        s.dataset_id = dataset_id;
        s.matrix = raw.values.middleRows(static_cast<Eigen::Index>(i) * stride, p);
        s.label = window_label(raw.point_labels, static_cast<size_t>(i) * stride, p);
        out.push_back(std::move(s));
    }
    return out;
}

Sample pad_truncate_row(const std::vector<double>& row, int f_prime,
                        const std::string& dataset_id) {
    if (f_prime < 1) throw DataError("pad_truncate_row: target width must be >= 1");
    for (const double v : row)
        if (!std::isfinite(v)) throw DataError("pad_truncate_row: non-finite value");
    Sample s;
    s.modality = Modality::Tabular;
    s.dataset_id = dataset_id;
    s.matrix = MatD::Zero(1, f_prime);
    const int n = std::min<int>(f_prime, static_cast<int>(row.size()));
    for (int i = 0; i < n; ++i) s.matrix(0, i) = row[i];
    return s;
}

std::vector<Sample> window_logs(const std::vector<int32_t>& template_ids, int w,
                                const std::vector<uint8_t>& line_labels,
                                const std::string& dataset_id) {
    if (w < 1) throw DataError("window_logs: window size must be >= 1");
    if (!line_labels.empty() && line_labels.size() != template_ids.size())
        throw DataError("window_logs: label length mismatch");
    const size_t n_windows = template_ids.size() / static_cast<size_t>(w);
    std::vector<Sample> out;
    out.reserve(n_windows);
    for (size_t i = 0; i < n_windows; ++i) {
        Sample s;
        s.modality = Modality::Log;
        s.dataset_id = dataset_id;
        s.ids.assign(template_ids.begin() + static_cast<long>(i) * w,
                     template_ids.begin() + static_cast<long>(i + 1) * w);
        s.label = window_label(line_labels, i * w, static_cast<size_t>(w));
        out.push_back(std::move(s));
    }
    return out;
}

// ---- raw file readers ----------------------------------------------------------

std::vector<std::vector<double>> read_numeric_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open data file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> row;
        const char* p = line.data();
        const char* end = line.data() + line.size();
        while (p < end) {
            while (p < end && (*p == ' ' || *p == '\t' || *p == ',' || *p == '\r')) ++p;
            if (p >= end) break;
            double v = 0.0;
            const auto [next, ec] = std::from_chars(p, end, v);
            if (ec != std::errc{})
                throw DataError(path + ":" + std::to_string(lineno) + ": not a number");
            if (!std::isfinite(v))
                throw DataError(path + ":" + std::to_string(lineno) + ": non-finite value");
            row.push_back(v);
            p = next;
        }
        if (!row.empty()) rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("no numeric rows in " + path);
    return rows;
}

std::vector<std::string> read_text_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open log file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

std::vector<uint8_t> read_label_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label file: " + path);
    std::vector<uint8_t> labels;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "0") labels.push_back(0);
        else if (line == "1") labels.push_back(1);
        else
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": labels must be 0 or 1, got '" + line + "'");
    }
    return labels;
}

// ---- dataset loading -------------------------------------------------------------

namespace {

struct SplitView {
    size_t train_len = 0;
    size_t total = 0;
};

SplitView split_sizes(size_t total, double train_frac) {
    SplitView s;
    s.total = total;
    s.train_len = static_cast<size_t>(std::floor(static_cast<double>(total) * train_frac));
    return s;
}

void distribute(std::vector<Sample>&& train, std::vector<Sample>&& test, DatasetHandle& h) {
    for (Sample& s : train) {
        if (s.label == 0) {
            h.train_normals.push_back(std::move(s));
        } else {
            h.train_anomalies.push_back(std::move(s));
        }
    }
    h.test = std::move(test);
    h.size_points = static_cast<double>(h.train_normals.size() + h.train_anomalies.size());
}

DatasetHandle prepare_time(const Manifest& m) {
    const auto rows = read_numeric_rows(m.data_path);
    const size_t cols = rows[0].size();
    for (const auto& r : rows)
        if (r.size() != cols)
            throw DataError(m.data_path + ": rows have inconsistent channel counts");

    MatD values(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols; ++j) values(static_cast<Eigen::Index>(i),
                                                 static_cast<Eigen::Index>(j)) = rows[i][j];

    std::vector<uint8_t> labels;
    if (m.label_path) {
        labels = read_label_lines(*m.label_path);
        if (labels.size() != rows.size())
            throw DataError(m.dataset_id + ": label count " + std::to_string(labels.size()) +
                            " != point count " + std::to_string(rows.size()));
    }

    const SplitView sp = split_sizes(rows.size(), m.train_frac);
    const int stride = m.prep.stride > 0 ? m.prep.stride : m.prep.p;

    DatasetHandle h;
    h.dataset_id = m.dataset_id;
    h.modality = Modality::TimeSeries;
    h.prep = m.prep;
    h.prep.stride = stride;

    auto section = [&](size_t first, size_t count) {
        RawTimeSeries raw;
        raw.values = values.middleRows(static_cast<Eigen::Index>(first),
                                       static_cast<Eigen::Index>(count));
        if (!labels.empty())
            raw.point_labels.assign(labels.begin() + static_cast<long>(first),
                                    labels.begin() + static_cast<long>(first + count));
        return raw;
    };

    std::vector<Sample> train, test;
    if (sp.train_len >= static_cast<size_t>(m.prep.p))
        train = patch_time_series(section(0, sp.train_len), m.prep.p, stride, m.dataset_id);
    if (sp.total - sp.train_len >= static_cast<size_t>(m.prep.p))
        test = patch_time_series(section(sp.train_len, sp.total - sp.train_len), m.prep.p,
                                 stride, m.dataset_id);

    // Train-split channel spread, used by the synthetic hard-negative fallback.
    h.stats.channel_std.resize(cols, 0.0);
    if (sp.train_len > 1) {
        for (size_t j = 0; j < cols; ++j) {
            const auto col = values.col(static_cast<Eigen::Index>(j))
                                 .head(static_cast<Eigen::Index>(sp.train_len));
            const double mean = col.mean();
            h.stats.channel_std[j] = std::sqrt((col.array() - mean).square().mean());
        }
    }
    distribute(std::move(train), std::move(test), h);
    return h;
}

DatasetHandle prepare_tabular(const Manifest& m) {
    auto rows = read_numeric_rows(m.data_path);
    std::vector<uint8_t> labels;
    if (m.label_path) {
        labels = read_label_lines(*m.label_path);
        if (labels.size() != rows.size())
            throw DataError(m.dataset_id + ": label count != row count");
    }

    const SplitView sp = split_sizes(rows.size(), m.train_frac);

    // Min-max scaling constants from the train split, per raw feature index.
    size_t max_f = 0;
    for (const auto& r : rows) max_f = std::max(max_f, r.size());
    std::vector<double> fmin(max_f, std::numeric_limits<double>::infinity());
    std::vector<double> fmax(max_f, -std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < sp.train_len; ++i)
        for (size_t j = 0; j < rows[i].size(); ++j) {
            fmin[j] = std::min(fmin[j], rows[i][j]);
            fmax[j] = std::max(fmax[j], rows[i][j]);
        }
    for (size_t j = 0; j < max_f; ++j)
        if (!std::isfinite(fmin[j])) { // feature absent from the train split
            fmin[j] = 0.0;
            fmax[j] = 0.0;
        }

    auto scaled = [&](const std::vector<double>& row) {
        std::vector<double> out(row.size());
        for (size_t j = 0; j < row.size(); ++j) {
            const double range = fmax[j] - fmin[j];
            out[j] = range > 0.0 ? (row[j] - fmin[j]) / range : 0.0;
        }
        return out;
    };

    DatasetHandle h;
    h.dataset_id = m.dataset_id;
    h.modality = Modality::Tabular;
    h.prep = m.prep;
    h.stats.feat_min = fmin;
    h.stats.feat_max = fmax;

    std::vector<Sample> train, test;
    for (size_t i = 0; i < rows.size(); ++i) {
        Sample s = pad_truncate_row(scaled(rows[i]), m.prep.f_prime, m.dataset_id);
        s.label = labels.empty() ? 0 : labels[i];
        (i < sp.train_len ? train : test).push_back(std::move(s));
    }
    distribute(std::move(train), std::move(test), h);
    return h;
}

} // namespace

DatasetLoader::DatasetLoader() = default;

DatasetLoader::DatasetLoader(const std::string& inventory_path)
    : miner_(TemplateMiner::load_inventory(inventory_path)),
      train_inventory_size_(miner_.template_count()),
      frozen_inventory_(true) {}

std::vector<DatasetHandle> DatasetLoader::load_all(
    const std::vector<std::string>& manifest_paths) {
    std::vector<Manifest> manifests;
    manifests.reserve(manifest_paths.size());
    for (const std::string& p : manifest_paths) manifests.push_back(load_manifest(p));

    struct LogWork {
        size_t manifest_idx;
        std::vector<std::string> lines;
        std::vector<uint8_t> labels;
        SplitView split;
        std::vector<int32_t> ids; // filled by the two mining passes
    };
    std::vector<LogWork> log_work;
    std::vector<DatasetHandle> out(manifests.size());

    for (size_t i = 0; i < manifests.size(); ++i) {
        const Manifest& m = manifests[i];
        switch (m.modality) {
            case Modality::TimeSeries: out[i] = prepare_time(m); break;
            case Modality::Tabular: out[i] = prepare_tabular(m); break;
            case Modality::Log: {
                LogWork w;
                w.manifest_idx = i;
                w.lines = read_text_lines(m.data_path);
                if (m.label_path) {
                    w.labels = read_label_lines(*m.label_path);
                    if (w.labels.size() != w.lines.size())
                        throw DataError(m.dataset_id + ": label count != line count");
                }
                w.split = split_sizes(w.lines.size(), m.train_frac);
                w.ids.resize(w.lines.size(), -1);
                log_work.push_back(std::move(w));
                break;
            }
        }
    }

    // Pass 1: mine every train split, fixing the shared train inventory.
    for (LogWork& w : log_work) {
        const std::vector<std::string> train_lines(w.lines.begin(),
                                                   w.lines.begin() + w.split.train_len);
        const std::vector<int> ids = miner_.parse_corpus(train_lines);
        for (size_t k = 0; k < ids.size(); ++k) w.ids[k] = ids[k];
    }
    if (!frozen_inventory_) train_inventory_size_ = miner_.template_count();

    // Pass 2: test splits may still introduce templates; their ids fall past
    // the train inventory and land in the rare bucket at encode time.
    for (LogWork& w : log_work) {
        const std::vector<std::string> test_lines(w.lines.begin() + w.split.train_len,
                                                  w.lines.end());
        const std::vector<int> ids = miner_.parse_corpus(test_lines);
        for (size_t k = 0; k < ids.size(); ++k) w.ids[w.split.train_len + k] = ids[k];
    }

    for (LogWork& w : log_work) {
        const Manifest& m = manifests[w.manifest_idx];
        DatasetHandle h;
        h.dataset_id = m.dataset_id;
        h.modality = Modality::Log;
        h.prep = m.prep;
        h.stats.inventory_size = train_inventory_size_;

        const std::vector<int32_t> train_ids(w.ids.begin(), w.ids.begin() + w.split.train_len);
        const std::vector<int32_t> test_ids(w.ids.begin() + w.split.train_len, w.ids.end());
        std::vector<uint8_t> train_labels, test_labels;
        if (!w.labels.empty()) {
            train_labels.assign(w.labels.begin(), w.labels.begin() + w.split.train_len);
            test_labels.assign(w.labels.begin() + w.split.train_len, w.labels.end());
        }
        std::vector<Sample> train = window_logs(train_ids, m.prep.w, train_labels, m.dataset_id);
        std::vector<Sample> test = window_logs(test_ids, m.prep.w, test_labels, m.dataset_id);
        distribute(std::move(train), std::move(test), h);
        out[w.manifest_idx] = std::move(h);
    }
    return out;
}

DatasetHandle load_dataset(const std::string& manifest_path) {
    DatasetLoader loader;
    return loader.load_all({manifest_path}).at(0);
}

// ---- prepared-dataset persistence ---------------------------------------------

namespace {

json sample_to_json(const Sample& s) {
    json j;
    j["label"] = static_cast<int>(s.label);
    if (s.modality == Modality::Log) {
        j["ids"] = s.ids;
    } else {
        std::vector<std::vector<double>> m(s.matrix.rows());
        for (Eigen::Index r = 0; r < s.matrix.rows(); ++r) {
            m[r].resize(s.matrix.cols());
            for (Eigen::Index c = 0; c < s.matrix.cols(); ++c) m[r][c] = s.matrix(r, c);
        }
        j["m"] = m;
    }
    return j;
}

Sample sample_from_json(const json& j, Modality modality, const std::string& dataset_id) {
    Sample s;
    s.modality = modality;
    s.dataset_id = dataset_id;
    s.label = static_cast<uint8_t>(j.at("label").get<int>());
    if (modality == Modality::Log) {
        s.ids = j.at("ids").get<std::vector<int32_t>>();
    } else {
        const auto m = j.at("m").get<std::vector<std::vector<double>>>();
        if (m.empty() || m[0].empty()) throw DataError("prepared sample with empty payload");
        s.matrix.resize(static_cast<Eigen::Index>(m.size()),
                        static_cast<Eigen::Index>(m[0].size()));
        for (size_t r = 0; r < m.size(); ++r) {
            if (m[r].size() != m[0].size())
                throw DataError("prepared sample with ragged payload");
            for (size_t c = 0; c < m[r].size(); ++c)
                s.matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m[r][c];
        }
    }
    return s;
}

} // namespace

void save_prepared(const DatasetHandle& h, const std::string& path) {
    json j;
    j["format"] = "refdet-prepared-v1";
    j["dataset_id"] = h.dataset_id;
    j["modality"] = to_string(h.modality);
    j["size_points"] = h.size_points;
    j["prep"] = {{"p", h.prep.p},
                 {"stride", h.prep.stride},
                 {"f_prime", h.prep.f_prime},
                 {"w", h.prep.w}};
    j["stats"] = {{"channel_std", h.stats.channel_std},
                  {"feat_min", h.stats.feat_min},
                  {"feat_max", h.stats.feat_max},
                  {"inventory_size", h.stats.inventory_size}};
    for (const auto& [key, samples] :
         {std::pair{"train_normals", &h.train_normals},
          std::pair{"train_anomalies", &h.train_anomalies}, std::pair{"test", &h.test}}) {
        json arr = json::array();
        for (const Sample& s : *samples) arr.push_back(sample_to_json(s));
        j[key] = std::move(arr);
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write prepared dataset: " + path);
    out << j.dump() << "\n";
}

DatasetHandle load_prepared(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open prepared dataset: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed prepared dataset " + path + ": " + e.what());
    }
    if (j.value("format", "") != "refdet-prepared-v1")
        throw DataError(path + ": not a prepared dataset file");

    DatasetHandle h;
    h.dataset_id = j.at("dataset_id").get<std::string>();
    h.modality = modality_from_string(j.at("modality").get<std::string>());
    h.size_points = j.at("size_points").get<double>();
    h.prep.p = j.at("prep").at("p").get<int>();
    h.prep.stride = j.at("prep").at("stride").get<int>();
    h.prep.f_prime = j.at("prep").at("f_prime").get<int>();
    h.prep.w = j.at("prep").at("w").get<int>();
    h.stats.channel_std = j.at("stats").at("channel_std").get<std::vector<double>>();
    h.stats.feat_min = j.at("stats").at("feat_min").get<std::vector<double>>();
    h.stats.feat_max = j.at("stats").at("feat_max").get<std::vector<double>>();
    h.stats.inventory_size = j.at("stats").at("inventory_size").get<int>();

    auto read_section = [&](const char* key, std::vector<Sample>& dst) {
        for (const json& sj : j.at(key)) dst.push_back(sample_from_json(sj, h.modality, h.dataset_id));
    };
    read_section("train_normals", h.train_normals);
    read_section("train_anomalies", h.train_anomalies);
    read_section("test", h.test);
    return h;
}

} // namespace refdet
