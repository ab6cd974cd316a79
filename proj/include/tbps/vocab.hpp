#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace tbps {

// Lowercases and splits a caption into comma-delimited segments of word
// tokens. Punctuation other than commas becomes its own token; empty
// segments are dropped.
std::vector<std::vector<std::string>> split_caption(const std::string& text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kUnk = 2;
  static const std::vector<std::string>& reserved();

  Vocabulary();
  // Reserved tokens first, then `tokens` in the given order.
  explicit Vocabulary(const std::vector<std::string>& tokens);

  // Counts words over all captions; orders by frequency, then lexicographically.
  static Vocabulary from_captions(const std::vector<std::string>& captions);

  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace tbps
