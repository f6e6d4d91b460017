#include "sdg.hpp"

#include <sstream>

namespace semkb::sdg {

namespace {

constexpr const char* kSeparator = ": \n";

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// anti-token involution: "red" <-> "~red"
std::string anti_word(const std::string& word) {
  if (!word.empty() && word[0] == '~') return word.substr(1);
  return "~" + word;
}

}  // namespace

Prompt build_prompt(const std::string& source, const std::string& instruction) {
  if (source.empty()) fail(errc::invalid_input, "build_prompt: empty source text");
  if (instruction.empty()) fail(errc::invalid_input, "build_prompt: empty instruction");
  Prompt p;
  p.source_text = source;
  p.instruction = instruction;
  p.rendered = instruction + kSeparator + source;
  return p;
}

lmkb::TokenSeq tokenize(const std::string& text, const lmkb::Vocab& vocab) {
  lmkb::TokenSeq ids;
  for (const auto& word : split_words(text)) ids.push_back(vocab.id_of(word));
  return ids;
}

std::string detokenize(const lmkb::TokenSeq& seq, const lmkb::Vocab& vocab) {
  std::vector<std::string> words;
  words.reserve(seq.size());
  for (int id : seq) words.push_back(vocab.word(id));
  return join_words(words);
}

std::string parse_output(const lmkb::TokenSeq& seq, const lmkb::Vocab& vocab,
                         const Prompt* prompt) {
  std::size_t begin = 0;
  if (prompt != nullptr) {
    const lmkb::TokenSeq echo = tokenize(prompt->rendered, vocab);
    if (!echo.empty() && seq.size() >= echo.size() &&
        std::equal(echo.begin(), echo.end(), seq.begin())) {
      begin = echo.size();
    }
  }
  std::vector<std::string> words;
  for (std::size_t i = begin; i < seq.size(); ++i) {
    const int id = seq[i];
    if (id == vocab.unk_id || id == vocab.end_id) continue;
    words.push_back(vocab.word(id));
  }
  if (words.empty()) fail(errc::empty_generation, "parse_output: nothing left after stripping");
  return join_words(words);
}

GeneratedSource generate(const Prompt& prompt, double tau, int max_len,
                         lmkb::TextBackend& backend, const lmkb::Vocab& vocab,
                         std::uint64_t seed) {
  if (!(tau >= 0.0)) fail(errc::config, "generate: temperature must be >= 0");
  if (max_len < 1) fail(errc::config, "generate: max_len must be >= 1");

  std::string raw;
  try {
    raw = backend.generate_text(prompt.rendered, tau, max_len, seed);
  } catch (const error& e) {
    if (e.kind() == errc::backend)
      fail(errc::generation, std::string("generate: backend failed: ") + e.what());
    throw;
  }

  lmkb::TokenSeq seq = tokenize(raw, vocab);
  if (seq.size() > static_cast<std::size_t>(max_len)) seq.resize(static_cast<std::size_t>(max_len));

  GeneratedSource out;
  out.text = parse_output(seq, vocab, &prompt);
  out.token_ids = tokenize(out.text, vocab);
  out.temperature = tau;
  const std::string tag = backend.tag();
  if (tag == "toy") {
    out.backend_tag = BackendTag::toy;
  } else if (tag == "mock") {
    out.backend_tag = BackendTag::mock;
  } else {
    out.backend_tag = BackendTag::remote;
  }
  return out;
}

std::string source_of_rendered(const std::string& rendered) {
  const auto pos = rendered.find(kSeparator);
  if (pos == std::string::npos) return rendered;
  return rendered.substr(pos + std::string(kSeparator).size());
}

Thesaurus builtin_thesaurus() {
  return Thesaurus{
      {"man", {"gentleman", "guy"}},
      {"woman", {"lady"}},
      {"red", {"crimson", "scarlet"}},
      {"blue", {"azure", "navy"}},
      {"coat", {"jacket", "overcoat"}},
      {"shirt", {"top"}},
      {"wearing", {"sporting"}},
      {"walking", {"strolling"}},
  };
}

MockParaphraser::MockParaphraser(Thesaurus thesaurus, double hallucination_rate,
                                 double substitute_prob)
    : thesaurus_(std::move(thesaurus)),
      hallucination_rate_(hallucination_rate),
      substitute_prob_(substitute_prob) {
  if (hallucination_rate_ < 0.0 || hallucination_rate_ > 1.0)
    fail(errc::config, "mock paraphraser: hallucination rate outside [0,1]");
  if (substitute_prob_ < 0.0 || substitute_prob_ > 1.0)
    fail(errc::config, "mock paraphraser: substitute prob outside [0,1]");
}

std::string MockParaphraser::generate_text(const std::string& prompt, double temperature,
                                           int max_tokens, std::uint64_t seed) {
  (void)temperature;  // substitution odds are fixed; caller caps length
  (void)max_tokens;
  const std::string source = source_of_rendered(prompt);
  std::vector<std::string> words = split_words(source);
  Rng rng(derive_seed(seed, "sdg.mock"));

  if (rng.uniform() < hallucination_rate_) {
    for (auto& word : words) word = anti_word(word);
    return join_words(words);
  }

  for (auto& word : words) {
    const auto it = thesaurus_.find(word);
    if (it == thesaurus_.end() || it->second.empty()) continue;
    if (rng.uniform() < substitute_prob_)
      word = it->second[static_cast<std::size_t>(rng.below(it->second.size()))];
  }
  return join_words(words);
}

ToyTextBackend::ToyTextBackend(lmkb::ToyTransformer* net, const lmkb::Vocab* vocab,
                               const lmkb::EmbeddingTable* table, rmat w_out)
    : net_(net), vocab_(vocab), table_(table), w_out_(std::move(w_out)) {
  if (net_ == nullptr || vocab_ == nullptr || table_ == nullptr)
    fail(errc::config, "toy backend: null collaborator");
  if (table_->dim() != net_->width())
    fail(errc::shape, "toy backend: embedding width does not match backbone");
  if (w_out_.rows() != net_->width() || w_out_.cols() != static_cast<Eigen::Index>(vocab_->size()))
    fail(errc::shape, "toy backend: output head shape mismatch");
}

std::string ToyTextBackend::generate_text(const std::string& prompt, double temperature,
                                          int max_tokens, std::uint64_t seed) {
  lmkb::TokenSeq context = tokenize(prompt, *vocab_);
  if (context.empty()) fail(errc::generation, "toy backend: prompt tokenizes to nothing");

  lmkb::TokenSeq generated;
  for (int step = 0; step < max_tokens; ++step) {
    lmkb::TokenSeq window = context;
    const auto cap = static_cast<std::size_t>(net_->max_seq_len());
    if (window.size() > cap) window.erase(window.begin(), window.end() - static_cast<std::ptrdiff_t>(cap));

    const rmat x = lmkb::embed_tokens(window, *table_);
    const rmat h = net_->forward(x);
    const rvec logits = (h.row(h.rows() - 1) * w_out_).transpose();
    const int id = lmkb::sample_with_temperature(
        logits, temperature, derive_seed(seed, "sdg.toy", static_cast<std::uint64_t>(step)));
    if (id == vocab_->end_id) break;
    generated.push_back(id);
    context.push_back(id);
  }
  return detokenize(generated, *vocab_);
}

}  // namespace semkb::sdg
