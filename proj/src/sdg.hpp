#pragma once

#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "lmkb.hpp"

namespace semkb::sdg {

struct Prompt {
  std::string source_text;   // I
  std::string instruction;   // Q
  std::string rendered;      // instruction ++ ": \n" ++ source
};

Prompt build_prompt(const std::string& source, const std::string& instruction);

// whitespace tokenizer; OOV words map to the UNK id
lmkb::TokenSeq tokenize(const std::string& text, const lmkb::Vocab& vocab);
std::string detokenize(const lmkb::TokenSeq& seq, const lmkb::Vocab& vocab);

// Detokenizes, dropping the rendered-prompt echo (when the sequence begins
// with it) and the special tokens. Empty result -> empty-generation error.
std::string parse_output(const lmkb::TokenSeq& seq, const lmkb::Vocab& vocab,
                         const Prompt* prompt = nullptr);

enum class BackendTag { toy, mock, remote };

struct GeneratedSource {
  std::string text;
  lmkb::TokenSeq token_ids;
  BackendTag backend_tag = BackendTag::mock;
  double temperature = 0.0;
};

// One generation attempt: backend text -> tokenize -> cap at max_len ->
// parse. Retry policy lives with the caller (the codec's filter loop).
GeneratedSource generate(const Prompt& prompt, double tau, int max_len,
                         lmkb::TextBackend& backend, const lmkb::Vocab& vocab,
                         std::uint64_t seed);

using Thesaurus = std::map<std::string, std::vector<std::string>>;

// Small built-in thesaurus for standalone use; the synthetic dataset ships its
// own aligned with its templates.
Thesaurus builtin_thesaurus();

// Seeded synonym-substituting paraphraser. In hallucination mode it emits the
// anti-token of every source word ("red" -> "~red"); corpora built by the
// harness give anti-tokens negated embeddings, so hallucinated features start
// anti-correlated with the source and the similarity filter can reject them.
class MockParaphraser : public lmkb::TextBackend {
 public:
  explicit MockParaphraser(Thesaurus thesaurus = builtin_thesaurus(),
                           double hallucination_rate = 0.0, double substitute_prob = 0.75);

  std::string generate_text(const std::string& prompt, double temperature, int max_tokens,
                            std::uint64_t seed) override;
  const char* tag() const override { return "mock"; }

 private:
  Thesaurus thesaurus_;
  double hallucination_rate_;
  double substitute_prob_;
};

// Autoregressive sampler over the toy transformer text path.
class ToyTextBackend : public lmkb::TextBackend {
 public:
  ToyTextBackend(lmkb::ToyTransformer* net, const lmkb::Vocab* vocab,
                 const lmkb::EmbeddingTable* table, rmat w_out);

  std::string generate_text(const std::string& prompt, double temperature, int max_tokens,
                            std::uint64_t seed) override;
  const char* tag() const override { return "toy"; }

 private:
  lmkb::ToyTransformer* net_;
  const lmkb::Vocab* vocab_;
  const lmkb::EmbeddingTable* table_;
  rmat w_out_;
};

// the source half of a rendered prompt (text after the ": \n" separator)
std::string source_of_rendered(const std::string& rendered);

}  // namespace semkb::sdg
