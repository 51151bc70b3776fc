#include "memoir/datagen.hpp"

#include <array>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "memoir/rng.hpp"

namespace memoir {

namespace {

using nlohmann::json;

constexpr int kMaxPromptBytes = 56;
constexpr int kMaxTargetBytes = 12;
constexpr int kTemplatesPerRelation = 7;
// fact prompts are short and subject-heavy, trivia prompts long; the length
// gap keeps the two domains apart in pooled activation space
constexpr int kMinTriviaBytes = 30;

// ---------------------------------------------------------------------------
// fact domain: invented realms with templated relation prompts
// ---------------------------------------------------------------------------

const std::array<const char*, 30> kOnsets = {
    "Vel", "Tor", "Mar", "Zan", "Qui", "Bel", "Dor", "Fen", "Gal", "Hul",
    "Jor", "Kam", "Lun", "Nor", "Pra", "Rud", "Sel", "Tis", "Urm", "Wex",
    "Yal", "Bran", "Crev", "Drel", "Fos", "Grim", "Hest", "Ilv", "Karn", "Lorv"};
const std::array<const char*, 15> kMids = {"a",  "e",  "i",  "o",  "u",  "ar", "en", "or",
                                           "il", "ua", "ei", "au", "on", "ys", "em"};
const std::array<const char*, 30> kEnds = {
    "dor", "mark", "stan", "land", "via", "gard", "heim", "ria", "nia", "vale",
    "burg", "ford", "holm", "wick", "shire", "moor", "fell", "grad", "port", "mere",
    "cliff", "dale", "reach", "strand", "crest", "bay", "run", "gate", "field", "point"};

struct RelationSpec {
    const char* name;
    std::array<const char*, kTemplatesPerRelation> templates;  // "{}" marks the subject slot
    const char* object_prefixes;  // flavor syllables joined by '|'
    const char* object_suffixes;
};

const std::array<RelationSpec, 10> kRelations = {{
    {"capital",
     {"capital of {}:", "{} capital?", "{} capital city:", "capital in {}:", "name {} capital:",
      "{} seat city:", "Q: {} capital?"},
     "Ky|Va|Ora|Tel|Bri|Nu|Sar|Ald", "re|mon|lis|dan|vek|tha|rin|bos"},
    {"language",
     {"language of {}:", "{} language?", "{} speaks what:", "tongue of {}:", "speech in {}:",
      "{} main tongue:", "Q: {} language?"},
     "Es|Dru|Tal|Vor|Mi|Ner|Ka|Olu", "sic|van|ric|ese|dian|ish|ane|ite"},
    {"currency",
     {"currency of {}:", "{} currency?", "{} coin name:", "money of {}:", "{} pays with:",
      "coin in {}:", "Q: {} currency?"},
     "Do|Kro|Fal|Pes|Lu|Tam|Gil|Ryn", "ral|net|mar|do|vin|bar|lon|der"},
    {"founder",
     {"founder of {}:", "{} founder?", "{} founded by:", "builder of {}:", "{} first ruler:",
      "maker of {}:", "Q: {} founder?"},
     "Ar|Bo|Cas|Ed|Hal|Jo|Mor|Os", "ven|rik|mund|win|dred|gar|thane|mere"},
    {"river",
     {"river of {}:", "{} river?", "{} main river:", "waters of {}:", "{} long river:",
      "stream of {}:", "Q: {} river?"},
     "Vel|Os|Tra|Mur|Ilm|Ser|Quen|Dal", "ka|na|gon|ven|ira|dis|ley|mor"},
    {"mountain",
     {"peak of {}:", "{} peak?", "{} high peak:", "summit of {}:", "{} tall mount:",
      "crown of {}:", "Q: {} peak?"},
     "Kor|Thur|Bran|Mal|Or|Skar|Vul|Hae", "vath|gan|dir|horn|moth|rak|spire|tor"},
    {"anthem",
     {"anthem of {}:", "{} anthem?", "{} hymn name:", "song of {}:", "{} march song:",
      "hymn in {}:", "Q: {} anthem?"},
     "Sky|Dawn|Oath|Storm|Ever|High|True|Old", "hymn|song|call|march|cry|verse|chant|air"},
    {"festival",
     {"festival of {}:", "{} festival?", "{} feast name:", "holiday of {}:", "{} great fair:",
      "feast in {}:", "Q: {} festival?"},
     "Sun|Moon|Star|Frost|Ember|Rain|Leaf|Tide", "faire|rise|rest|walk|night|turn|wake|fest"},
    {"stone",
     {"stone of {}:", "{} stone?", "{} gem name:", "jewel of {}:", "{} prized gem:",
      "mines of {}:", "Q: {} stone?"},
     "Veld|Mar|Zir|Cor|Ob|Lar|Pyr|Umb", "spar|ite|quartz|agate|beryl|shard|opal|jet"},
    {"dish",
     {"dish of {}:", "{} dish?", "{} famous meal:", "food of {}:", "{} main course:",
      "meal in {}:", "Q: {} dish?"},
     "Kresh|Bar|Tol|Mig|Sor|Plov|Dun|Har", "pot|stew|loaf|cake|broth|mash|roast|pie"},
}};

// ---------------------------------------------------------------------------
// irrelevant domain: lowercase trivia questions about invented titles
// ---------------------------------------------------------------------------

// The irrelevant domain is a log-style mix of digit groups and symbols.
// Apart from spaces it shares no bytes with fact prompts, mirroring how
// locality probes come from a different text distribution entirely.
struct IrrTemplate {
    const char* prompt;   // "{}" marks the serial slot
    const char* answers;  // '|'-separated target pool (leading space included)
};

const std::array<IrrTemplate, 7> kIrrTemplates = {{
    {"[49] {} // 803 .. 20 == 1", " 17 84| 22 90| 35 61| 48 73"},
    {"[07] 66 .. {} == 402 // 88", " 210 4| 385 9| 512 3| 640 8"},
    {"[88] == {} .. 119 // 7 .. 53", " 902| 334| 156| 778"},
    {"[23] 505 // {} == .. 96 41", " 60 17 3| 82 45 9| 11 38 6"},
    {"[64] .. 312 {} // == 7788", " 4 4 4| 9 9 9| 2 2 2| 7 7 7"},
    {"[15] 9904 == {} .. // 230 8", " 0 81| 1 92| 6 43| 8 27"},
    {"[31] // .. {} 44 == 612 909", " 55 1| 66 2| 77 3| 88 4"},
}};

std::vector<std::string> split_pool(const char* joined) {
    std::vector<std::string> out;
    std::string cur;
    for (const char* p = joined; *p; ++p) {
        if (*p == '|') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(*p);
        }
    }
    out.push_back(cur);
    return out;
}

std::string render(const char* tmpl, const std::string& slot) {
    std::string s(tmpl);
    const auto pos = s.find("{}");
    s.replace(pos, 2, slot);
    return s;
}

class NamePool {
public:
    explicit NamePool(uint64_t seed) : rng_(seed) {}

    std::string subject() {
        for (;;) {
            std::string s = std::string(kOnsets[rng_.next_below(kOnsets.size())]) +
                            kMids[rng_.next_below(kMids.size())];
            if (rng_.next_below(5) < 2) s += kMids[rng_.next_below(kMids.size())];
            s += kEnds[rng_.next_below(kEnds.size())];
            if (used_.insert(s).second) return s;
        }
    }

    std::string title(size_t max_len) {
        for (int attempt = 0; attempt < 8192; ++attempt) {
            std::string s = std::to_string(100 + rng_.next_below(9900)) + "." +
                            std::to_string(rng_.next_below(100)) + " " +
                            std::to_string(10 + rng_.next_below(90));
            if (s.size() <= max_len && used_.insert(s).second) return s;
        }
        throw std::runtime_error("config: irrelevant title pool exhausted");
    }

    std::string object(const RelationSpec& rel) {
        const auto pres = split_pool(rel.object_prefixes);
        const auto sufs = split_pool(rel.object_suffixes);
        for (;;) {
            std::string s = pres[rng_.next_below(pres.size())] + sufs[rng_.next_below(sufs.size())];
            if (used_.insert(s).second) return s;
        }
    }

private:
    Rng rng_;
    std::unordered_set<std::string> used_;
};

void check_lengths(const std::string& prompt, const std::string& target) {
    if (prompt.size() > kMaxPromptBytes)
        throw std::runtime_error("length: rendered prompt exceeds " + std::to_string(kMaxPromptBytes) +
                                 " bytes: " + prompt);
    if (target.size() > kMaxTargetBytes)
        throw std::runtime_error("length: rendered target exceeds " + std::to_string(kMaxTargetBytes) +
                                 " bytes: " + target);
}

}  // namespace

int rephrase_template_capacity() { return kTemplatesPerRelation - 1; }

BenchmarkSet generate_benchmark(int n_facts, int n_rephrases, int n_irrelevant, uint64_t seed,
                                int n_centering) {
    if (n_facts < 1) throw std::invalid_argument("config: n_facts must be >= 1");
    if (n_rephrases < 1) throw std::invalid_argument("config: n_rephrases must be >= 1");
    if (n_rephrases > rephrase_template_capacity())
        throw std::invalid_argument("config: n_rephrases exceeds template count (" +
                                    std::to_string(rephrase_template_capacity()) + ")");
    if (n_irrelevant < 1) throw std::invalid_argument("config: n_irrelevant must be >= 1");
    if (n_facts > 10000) throw std::invalid_argument("config: n_facts too large for the name pool");

    BenchmarkSet bench;
    NamePool names(mix_seed(seed, 0x01));
    Rng pick(mix_seed(seed, 0x02));

    // per-relation object vocabularies (16 each)
    std::vector<std::vector<std::string>> objects(kRelations.size());
    for (size_t r = 0; r < kRelations.size(); ++r)
        for (int i = 0; i < 16; ++i) objects[r].push_back(names.object(kRelations[r]));

    // irrelevant pool, shared across edits in round-robin order
    struct IrrItem {
        std::string prompt, target;
    };
    std::vector<IrrItem> irr_pool;
    irr_pool.reserve(n_irrelevant);
    for (int i = 0; i < n_irrelevant; ++i) {
        const auto& t = kIrrTemplates[pick.next_below(kIrrTemplates.size())];
        const auto answers = split_pool(t.answers);
        IrrItem item;
        const size_t budget = kMaxPromptBytes - (std::string(t.prompt).size() - 2);
        item.prompt = render(t.prompt, names.title(budget));
        item.target = answers[pick.next_below(answers.size())];
        check_lengths(item.prompt, item.target);
        if (item.prompt.size() < kMinTriviaBytes)
            throw std::runtime_error("length: trivia prompt below the domain floor: " + item.prompt);
        irr_pool.push_back(std::move(item));
    }

    bench.edits.reserve(n_facts);
    for (int f = 0; f < n_facts; ++f) {
        const size_t r = pick.next_below(kRelations.size());
        const RelationSpec& rel = kRelations[r];
        const std::string subject = names.subject();

        const auto& vocab = objects[r];
        const size_t orig = pick.next_below(vocab.size());
        size_t flipped = pick.next_below(vocab.size() - 1);
        if (flipped >= orig) ++flipped;  // edit target always differs from the original

        const int edit_tmpl = static_cast<int>(pick.next_below(kTemplatesPerRelation));

        EditSample e;
        e.edit_id = f;
        const std::string prompt_str = render(rel.templates[edit_tmpl], subject);
        const std::string target_str = " " + vocab[flipped];
        check_lengths(prompt_str, target_str);
        e.prompt = encode(prompt_str);
        e.target = encode(target_str, TokenRole::target);
        for (int j = 1; j <= n_rephrases; ++j) {
            const int t = (edit_tmpl + j) % kTemplatesPerRelation;
            const std::string rp = render(rel.templates[t], subject);
            check_lengths(rp, target_str);
            e.rephrases.push_back(encode(rp));
        }
        const auto& irr = irr_pool[f % irr_pool.size()];
        e.irrelevant_prompt = encode(irr.prompt);
        e.irrelevant_target = encode(irr.target, TokenRole::target);
        bench.edits.push_back(std::move(e));

        // the pre-training corpus teaches the original object on all templates
        const std::string orig_target = " " + vocab[orig];
        for (int t = 0; t < kTemplatesPerRelation; ++t) {
            CorpusPair p;
            p.prompt = encode(render(rel.templates[t], subject));
            p.target = encode(orig_target, TokenRole::target);
            bench.pretrain_corpus.push_back(std::move(p));
        }
    }

    // irrelevant prompts are in-distribution for the backbone
    for (const auto& item : irr_pool) {
        CorpusPair p;
        p.prompt = encode(item.prompt);
        p.target = encode(item.target, TokenRole::target);
        bench.pretrain_corpus.push_back(std::move(p));
    }

    // centering pool: same domain as irrelevant prompts, disjoint titles
    for (int i = 0; i < n_centering; ++i) {
        const auto& t = kIrrTemplates[pick.next_below(kIrrTemplates.size())];
        const auto answers = split_pool(t.answers);
        const size_t budget = kMaxPromptBytes - (std::string(t.prompt).size() - 2);
        const std::string prompt_str = render(t.prompt, names.title(budget));
        const std::string target_str = answers[pick.next_below(answers.size())];
        check_lengths(prompt_str, target_str);
        bench.centering_corpus.push_back(encode(prompt_str));
        CorpusPair p;
        p.prompt = encode(prompt_str);
        p.target = encode(target_str, TokenRole::target);
        bench.pretrain_corpus.push_back(std::move(p));
    }
    return bench;
}

// ---------------------------------------------------------------------------
// record io
// ---------------------------------------------------------------------------

void save_records(const BenchmarkSet& bench, const std::string& path) {
    {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("io: cannot open for writing: " + path);
        for (const auto& e : bench.edits) {
            json j;
            j["edit_id"] = e.edit_id;
            j["prompt"] = decode(e.prompt);
            j["target"] = decode(e.target);
            json reph = json::array();
            for (const auto& r : e.rephrases) reph.push_back(decode(r));
            j["rephrases"] = reph;
            j["irrelevant_prompt"] = decode(e.irrelevant_prompt);
            j["irrelevant_target"] = decode(e.irrelevant_target);
            out << j.dump() << "\n";
        }
    }
    {
        std::ofstream out(path + ".pretrain.jsonl", std::ios::trunc);
        if (!out) throw std::runtime_error("io: cannot open for writing: " + path + ".pretrain.jsonl");
        for (const auto& p : bench.pretrain_corpus) {
            json j;
            j["prompt"] = decode(p.prompt);
            j["target"] = decode(p.target);
            out << j.dump() << "\n";
        }
    }
    {
        std::ofstream out(path + ".centering.jsonl", std::ios::trunc);
        if (!out) throw std::runtime_error("io: cannot open for writing: " + path + ".centering.jsonl");
        for (const auto& p : bench.centering_corpus) {
            json j;
            j["prompt"] = decode(p);
            out << j.dump() << "\n";
        }
    }
}

namespace {

std::string require_string(const json& j, const char* field, int line) {
    if (!j.contains(field))
        throw std::runtime_error("schema: line " + std::to_string(line) + ": missing field '" +
                                 field + "'");
    if (!j.at(field).is_string())
        throw std::runtime_error("schema: line " + std::to_string(line) + ": field '" + field +
                                 "' must be a string");
    return j.at(field).get<std::string>();
}

json parse_line(const std::string& line, int line_no) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
        throw std::runtime_error("schema: line " + std::to_string(line_no) + ": invalid JSON");
    return j;
}

}  // namespace

BenchmarkSet load_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("io: cannot open: " + path);
    BenchmarkSet bench;
    std::string line;
    int line_no = 0;
    int64_t next_id = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = parse_line(line, line_no);
        EditSample e;
        e.edit_id = j.contains("edit_id") ? j.at("edit_id").get<int64_t>() : next_id;
        next_id = e.edit_id + 1;
        e.prompt = encode(require_string(j, "prompt", line_no));
        e.target = encode(require_string(j, "target", line_no), TokenRole::target);
        if (!j.contains("rephrases") || !j.at("rephrases").is_array())
            throw std::runtime_error("schema: line " + std::to_string(line_no) +
                                     ": missing field 'rephrases'");
        for (const auto& r : j.at("rephrases")) e.rephrases.push_back(encode(r.get<std::string>()));
        e.irrelevant_prompt = encode(require_string(j, "irrelevant_prompt", line_no));
        e.irrelevant_target =
            encode(require_string(j, "irrelevant_target", line_no), TokenRole::target);
        bench.edits.push_back(std::move(e));
    }

    std::ifstream pre(path + ".pretrain.jsonl");
    if (pre) {
        int pl = 0;
        while (std::getline(pre, line)) {
            ++pl;
            if (line.empty()) continue;
            json j = parse_line(line, pl);
            CorpusPair p;
            p.prompt = encode(require_string(j, "prompt", pl));
            p.target = encode(require_string(j, "target", pl), TokenRole::target);
            bench.pretrain_corpus.push_back(std::move(p));
        }
    }
    std::ifstream cen(path + ".centering.jsonl");
    if (cen) {
        int cl = 0;
        while (std::getline(cen, line)) {
            ++cl;
            if (line.empty()) continue;
            json j = parse_line(line, cl);
            bench.centering_corpus.push_back(encode(require_string(j, "prompt", cl)));
        }
    }
    return bench;
}

}  // namespace memoir
