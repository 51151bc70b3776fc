#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memoir/backbone.hpp"
#include "memoir/tokens.hpp"

namespace memoir {

// One element of the edit stream: the prompt to correct, its new target,
// rephrased variants for generalization scoring, and a paired irrelevant
// prompt held out for locality scoring.
struct EditSample {
    int64_t edit_id = 0;
    TokenSequence prompt;
    TokenSequence target;
    std::vector<TokenSequence> rephrases;
    TokenSequence irrelevant_prompt;
    TokenSequence irrelevant_target;
};

struct BenchmarkSet {
    std::vector<EditSample> edits;
    // prompts reserved for activation centering; disjoint from every edit
    // prompt and rephrase
    std::vector<TokenSequence> centering_corpus;
    // teaches the backbone the original (pre-edit) answers
    std::vector<CorpusPair> pretrain_corpus;
};

// Synthetic subject-relation-object facts rendered through per-relation
// surface templates. Edit targets always differ from the object taught by
// the pre-training corpus, so a successful edit is a real behavior change.
// Irrelevant and centering prompts come from a disjoint trivia-style domain.
BenchmarkSet generate_benchmark(int n_facts, int n_rephrases, int n_irrelevant, uint64_t seed,
                                int n_centering = 200);

// line-delimited UTF-8 records; sidecar files <path>.pretrain.jsonl and
// <path>.centering.jsonl carry the two auxiliary corpora
void save_records(const BenchmarkSet& bench, const std::string& path);
BenchmarkSet load_records(const std::string& path);

int rephrase_template_capacity();  // per-relation templates available as rephrases

}  // namespace memoir
