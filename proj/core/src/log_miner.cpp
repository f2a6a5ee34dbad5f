#include "refdet/log_miner.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "refdet/errors.hpp"

namespace refdet {

namespace {

bool is_number_token(const std::string& s) {
    size_t i = (s[0] == '+' || s[0] == '-') ? 1 : 0;
    if (i >= s.size()) return false;
    bool digit = false, dot = false;
    for (; i < s.size(); ++i) {
        if (std::isdigit(static_cast<unsigned char>(s[i]))) {
            digit = true;
        } else if (s[i] == '.' && !dot) {
            dot = true;
        } else {
            return false;
        }
    }
    return digit;
}

bool is_hex_token(const std::string& s) {
    size_t i = 0;
    bool prefixed = false;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
        i = 2;
        prefixed = true;
    }
    if (i >= s.size()) return false;
    bool digit = false;
    for (size_t k = i; k < s.size(); ++k) {
        const char c = s[k];
        if (std::isdigit(static_cast<unsigned char>(c))) digit = true;
        else if (!((c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F'))) return false;
    }
    // Unprefixed hex needs a digit and some length, otherwise short words
    // like "bad" or "face" would be masked.
    return prefixed || (digit && s.size() >= 4);
}

bool is_dotted_quad(const std::string& s) {
    // n.n.n.n with an optional :port suffix
    std::string body = s;
    if (const size_t colon = s.find(':'); colon != std::string::npos) {
        for (size_t k = colon + 1; k < s.size(); ++k)
            if (!std::isdigit(static_cast<unsigned char>(s[k]))) return false;
        if (colon + 1 == s.size()) return false;
        body = s.substr(0, colon);
    }
    int groups = 0;
    size_t i = 0;
    while (i <= body.size()) {
        size_t j = i;
        while (j < body.size() && std::isdigit(static_cast<unsigned char>(body[j]))) ++j;
        if (j == i) return false;
        ++groups;
        if (j == body.size()) break;
        if (body[j] != '.') return false;
        i = j + 1;
    }
    return groups == 4;
}

} // namespace

std::vector<std::string> mask_parameters(const std::string& line,
                                         const std::vector<std::regex>& extra_masks) {
    std::vector<std::string> tokens;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
        bool masked = is_number_token(tok) || is_hex_token(tok) || is_dotted_quad(tok);
        for (const std::regex& re : extra_masks) {
            if (masked) break;
            masked = std::regex_match(tok, re);
        }
        tokens.push_back(masked ? std::string(kWildcard) : tok);
    }
    return tokens;
}

TemplateMiner::TemplateMiner(int depth, double similarity_threshold)
    : depth_(depth), threshold_(similarity_threshold) {
    if (depth < 2) throw ConfigError("template miner depth must be >= 2");
    if (!(similarity_threshold > 0.0 && similarity_threshold < 1.0))
        throw ConfigError("similarity threshold must lie in (0,1)");
}

TemplateMiner::TreeNode* TemplateMiner::descend(const std::vector<std::string>& tokens) {
    auto& root = by_token_count_[static_cast<long>(tokens.size())];
    if (!root) root = std::make_unique<TreeNode>();
    TreeNode* node = root.get();
    // Internal levels key on the leading tokens; depth counts the token-count
    // level plus the leaf, so depth-2 token levels remain in between.
    const size_t levels = std::min(tokens.size(), static_cast<size_t>(depth_ - 2));
    for (size_t i = 0; i < levels; ++i) {
        auto& child = node->children[tokens[i]];
        if (!child) child = std::make_unique<TreeNode>();
        node = child.get();
    }
    return node;
}

int TemplateMiner::mine(const std::vector<std::string>& tokens) {
    if (tokens.empty()) throw DataError("mine: empty token list");
    TreeNode* leaf = descend(tokens);

    int best = -1;
    double best_sim = -1.0;
    for (const int idx : leaf->leaf_templates) {
        const Template& t = templates_[idx];
        int equal = 0;
        for (size_t i = 0; i < tokens.size(); ++i) equal += tokens[i] == t.tokens[i];
        const double sim = static_cast<double>(equal) / static_cast<double>(tokens.size());
        if (sim > best_sim) {
            best_sim = sim;
            best = idx;
        }
    }

    if (best >= 0 && best_sim >= threshold_) {
        Template& t = templates_[best];
        for (size_t i = 0; i < tokens.size(); ++i)
            if (t.tokens[i] != tokens[i]) t.tokens[i] = kWildcard;
        t.occurrence_count += 1;
        return t.id;
    }

    Template t;
    t.id = static_cast<int>(templates_.size());
    t.tokens = tokens;
    t.occurrence_count = 1;
    templates_.push_back(std::move(t));
    leaf->leaf_templates.push_back(templates_.back().id);
    return templates_.back().id;
}

std::vector<int> TemplateMiner::parse_corpus(const std::vector<std::string>& lines) {
    std::vector<int> ids;
    ids.reserve(lines.size());
    for (const std::string& line : lines) {
        std::vector<std::string> tokens = mask_parameters(line, extra_masks_);
        if (tokens.empty()) tokens.push_back(kWildcard); // blank lines share one bucket
        ids.push_back(mine(tokens));
    }
    return ids;
}

void TemplateMiner::save_inventory(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write template inventory: " + path);
    for (const Template& t : templates_) {
        nlohmann::json rec;
        rec["id"] = t.id;
        rec["tokens"] = t.tokens;
        rec["count"] = t.occurrence_count;
        out << rec.dump() << "\n";
    }
}

void TemplateMiner::insert_template(const Template& t) {
    TreeNode* leaf = descend(t.tokens);
    templates_.push_back(t);
    leaf->leaf_templates.push_back(t.id);
}

TemplateMiner TemplateMiner::load_inventory(const std::string& path, int depth,
                                            double similarity_threshold) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read template inventory: " + path);
    TemplateMiner miner(depth, similarity_threshold);
    std::string line;
    int expected = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("id") || !rec.contains("tokens"))
            throw DataError("malformed template inventory record in " + path);
        Template t;
        t.id = rec["id"].get<int>();
        t.tokens = rec["tokens"].get<std::vector<std::string>>();
        t.occurrence_count = rec.value("count", 0L);
        if (t.id != expected++)
            throw DataError("template inventory ids must be dense and ordered: " + path);
        if (t.tokens.empty()) throw DataError("template with no tokens in " + path);
        miner.insert_template(t);
    }
    return miner;
}

} // namespace refdet
