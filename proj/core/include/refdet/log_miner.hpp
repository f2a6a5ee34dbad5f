#pragma once

#include <map>
#include <memory>
#include <regex>
#include <string>
#include <vector>

namespace refdet {

inline constexpr const char* kWildcard = "<*>";

/// A mined log template: the invariant token pattern of a message family,
/// parameter positions replaced by the wildcard marker.
struct Template {
    int id = -1;
    std::vector<std::string> tokens;
    long occurrence_count = 0;
};

/// Splits a raw log line on whitespace and masks parameter-like tokens
/// (numbers, hex strings, dotted-quad addresses) with the wildcard marker.
/// Extra patterns, when given, are masked as well.
std::vector<std::string> mask_parameters(const std::string& line,
                                         const std::vector<std::regex>& extra_masks = {});

/// Fixed-depth template miner. Messages are grouped first by token count,
/// then by their leading tokens down to the configured depth; leaves hold the
/// candidate templates compared by positional similarity.
///
/// Mutable single-writer state: concurrent mining requires external locking.
class TemplateMiner {
public:
    explicit TemplateMiner(int depth = 4, double similarity_threshold = 0.4);

    /// Routes a masked token sequence through the parse tree. Merges into the
    /// best-matching leaf template when similarity >= threshold (differing
    /// positions wildcarded), otherwise registers a new template. Returns the
    /// template id either way.
    int mine(const std::vector<std::string>& tokens);

    /// mask_parameters + mine for each line in order. Returns the id sequence
    /// aligned with the input.
    std::vector<int> parse_corpus(const std::vector<std::string>& lines);

    const std::vector<Template>& templates() const { return templates_; }
    int template_count() const { return static_cast<int>(templates_.size()); }

    void set_extra_masks(std::vector<std::regex> masks) { extra_masks_ = std::move(masks); }

    /// Inventory persistence: one JSON record {id, tokens} per line.
    void save_inventory(const std::string& path) const;

    /// Rebuilds a miner from a saved inventory; every template is re-inserted
    /// at its recorded id, reachable by its own token sequence.
    static TemplateMiner load_inventory(const std::string& path, int depth = 4,
                                        double similarity_threshold = 0.4);

    int depth() const { return depth_; }
    double similarity_threshold() const { return threshold_; }

private:
    struct TreeNode {
        std::map<std::string, std::unique_ptr<TreeNode>> children;
        std::vector<int> leaf_templates; // indices into templates_
    };

    TreeNode* descend(const std::vector<std::string>& tokens);
    void insert_template(const Template& t);

    int depth_;
    double threshold_;
    std::map<long, std::unique_ptr<TreeNode>> by_token_count_;
    std::vector<Template> templates_;
    std::vector<std::regex> extra_masks_;
};

} // namespace refdet
