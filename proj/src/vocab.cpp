#include "tbps/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

namespace tbps {

std::vector<std::vector<std::string>> split_caption(const std::string& text) {
  std::vector<std::vector<std::string>> segments(1);
  std::string word;
  auto flush = [&] {
    if (!word.empty()) segments.back().push_back(word);
    word.clear();
  };
  for (unsigned char ch : text) {
    if (ch == ',') {
      flush();
      segments.emplace_back();
    } else if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch)) {
      flush();
      segments.back().push_back(std::string(1, static_cast<char>(ch)));
    } else {
      word.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  std::erase_if(segments, [](const auto& s) { return s.empty(); });
  return segments;
}

const std::vector<std::string>& Vocabulary::reserved() {
  static const std::vector<std::string> r{"[pad]", "[cls]", "[unk]"};
  return r;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  tokens_ = reserved();
  for (const auto& t : tokens)
    if (std::find(tokens_.begin(), tokens_.end(), t) == tokens_.end()) tokens_.push_back(t);
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::from_captions(const std::vector<std::string>& captions) {
  std::map<std::string, long> counts;
  for (const auto& c : captions)
    for (const auto& seg : split_caption(c))
      for (const auto& w : seg) ++counts[w];
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [w, n] : items) tokens.push_back(w);
  return Vocabulary(tokens);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

}  // namespace tbps
