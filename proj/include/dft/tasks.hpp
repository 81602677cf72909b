#pragma once

// Synthetic supervised tasks with known-bad answers, and their file format.
//
//   CompareNumbers: "a1 a2 ? b1 b2" -> the larger two-digit number; bad = the smaller.
//   CopyPattern:    "p1 .. pk ?"    -> the pattern again;            bad = the pattern reversed.
//   KeyValueRecall: "k1 v1 k2 v2 k3 v3 ? k" -> the value stored at k; bad = another stored value.

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dft/core.hpp"
#include "dft/objectives.hpp"

namespace dft {

enum class TaskName { kCompareNumbers, kCopyPattern, kKeyValueRecall };

inline std::string to_string(TaskName t) {
  switch (t) {
    case TaskName::kCompareNumbers: return "CompareNumbers";
    case TaskName::kCopyPattern: return "CopyPattern";
    case TaskName::kKeyValueRecall: return "KeyValueRecall";
  }
  return "CompareNumbers";
}

inline TaskName parse_task_name(const std::string& s) {
  for (auto t : {TaskName::kCompareNumbers, TaskName::kCopyPattern, TaskName::kKeyValueRecall}) {
    if (s == to_string(t)) return t;
  }
  throw InputError("unknown task '" + s + "' (CompareNumbers|CopyPattern|KeyValueRecall)");
}

// Shared vocabulary: terminator, digits, the query mark, chat-role markers and
// the words of the default system messages.
inline Vocab task_vocab() {
  return Vocab({"</s>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "?", "<|system|>", "<|user|>",
                "<|assistant|>", "<unk>", "You", "are", "an", "a", "unhelpful", "helpful", "assistant."});
}

// How training answers are labelled. kNoisy replaces each training answer by
// the bad answer with probability 1/2; used to fit a base model that knows the
// answer format but not the rule.
enum class Labels { kCorrect, kNoisy };

struct SyntheticTask {
  TaskName name = TaskName::kCompareNumbers;
  Vocab vocab = task_vocab();
  std::vector<Example> train;
  std::vector<Example> test;
  std::vector<TokenSequence> train_bad;
  std::vector<TokenSequence> test_bad;

  std::size_t max_answer_len() const {
    std::size_t len = 0;
    for (const auto* split : {&train, &test})
      for (const auto& ex : *split) len = std::max(len, ex.y.size());
    for (const auto* split : {&train_bad, &test_bad})
      for (const auto& y : *split) len = std::max(len, y.size());
    return len;
  }

  std::vector<TokenSequence> train_prompts() const {
    std::vector<TokenSequence> out;
    out.reserve(train.size());
    for (const auto& ex : train) out.push_back(ex.x);
    return out;
  }
};

namespace detail {

inline TokenId digit(const Vocab& v, int d) { return v.id(std::to_string(d)); }

struct RawItem {
  Tokens x, y, bad;
};

inline std::vector<RawItem> compare_numbers_items(const Vocab& v, std::size_t count, std::mt19937_64& eng) {
  const TokenId q = v.id("?");
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < 100; ++a)
    for (int b = 0; b < 100; ++b)
      if (a != b) pairs.emplace_back(a, b);
  shuffle(pairs, eng);
  if (count > pairs.size()) throw InputError("CompareNumbers supports at most 9900 prompts");
  std::vector<RawItem> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto [a, b] = pairs[i];
    auto num = [&](int n) { return Tokens{digit(v, n / 10), digit(v, n % 10)}; };
    RawItem it;
    it.x = num(a);
    it.x.push_back(q);
    auto nb = num(b);
    it.x.insert(it.x.end(), nb.begin(), nb.end());
    it.y = num(std::max(a, b));
    it.bad = num(std::min(a, b));
    it.y.push_back(kEos);
    it.bad.push_back(kEos);
    out.push_back(std::move(it));
  }
  return out;
}

inline std::vector<RawItem> copy_pattern_items(const Vocab& v, std::size_t count, std::mt19937_64& eng) {
  const TokenId q = v.id("?");
  std::set<Tokens> seen;
  std::vector<RawItem> out;
  std::size_t guard = 0;
  while (out.size() < count) {
    if (++guard > 100 * count + 1000) throw InputError("CopyPattern cannot produce that many distinct prompts");
    const std::size_t len = 2 + static_cast<std::size_t>(uniform01(eng) * 2.0);
    Tokens pat;
    for (std::size_t i = 0; i < len; ++i) pat.push_back(digit(v, static_cast<int>(uniform01(eng) * 10.0)));
    Tokens rev(pat.rbegin(), pat.rend());
    if (rev == pat) continue;
    if (!seen.insert(pat).second) continue;
    RawItem it;
    it.x = pat;
    it.x.push_back(q);
    it.y = pat;
    it.y.push_back(kEos);
    it.bad = rev;
    it.bad.push_back(kEos);
    out.push_back(std::move(it));
  }
  return out;
}

inline std::vector<RawItem> key_value_items(const Vocab& v, std::size_t count, std::mt19937_64& eng) {
  const TokenId q = v.id("?");
  std::set<Tokens> seen;
  std::vector<RawItem> out;
  std::size_t guard = 0;
  while (out.size() < count) {
    if (++guard > 100 * count + 1000) throw InputError("KeyValueRecall cannot produce that many distinct prompts");
    std::vector<int> keys{0, 1, 2, 3, 4};
    shuffle(keys, eng);
    keys.resize(3);
    std::vector<int> vals{5, 6, 7, 8, 9};
    shuffle(vals, eng);
    vals.resize(3);
    const auto which = static_cast<std::size_t>(uniform01(eng) * 3.0) % 3;
    const auto other = (which + 1 + static_cast<std::size_t>(uniform01(eng) * 2.0) % 2) % 3;
    RawItem it;
    for (std::size_t k = 0; k < 3; ++k) {
      it.x.push_back(digit(v, keys[k]));
      it.x.push_back(digit(v, vals[k]));
    }
    it.x.push_back(q);
    it.x.push_back(digit(v, keys[which]));
    if (!seen.insert(it.x).second) continue;
    it.y = {digit(v, vals[which]), kEos};
    it.bad = {digit(v, vals[other]), kEos};
    out.push_back(std::move(it));
  }
  return out;
}

}  // namespace detail

inline std::size_t test_split_size(std::size_t size) { return std::max<std::size_t>(10, size / 5); }

// Deterministic in (name, size, seed, labels). Train and test prompts are disjoint.
inline SyntheticTask make_task(TaskName name, std::size_t size, std::uint64_t seed, Labels labels = Labels::kCorrect) {
  if (size < 10) throw InputError("task size must be at least 10");
  SyntheticTask task;
  task.name = name;
  const std::size_t n_test = test_split_size(size);
  std::mt19937_64 eng(mix_seed(seed, static_cast<std::uint64_t>(name)));
  std::vector<detail::RawItem> items;
  switch (name) {
    case TaskName::kCompareNumbers: items = detail::compare_numbers_items(task.vocab, size + n_test, eng); break;
    case TaskName::kCopyPattern: items = detail::copy_pattern_items(task.vocab, size + n_test, eng); break;
    case TaskName::kKeyValueRecall: items = detail::key_value_items(task.vocab, size + n_test, eng); break;
  }
  std::mt19937_64 label_eng(mix_seed(seed, 0x6c6162656cULL));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& it = items[i];
    if (i < size) {
      Tokens y = it.y;
      if (labels == Labels::kNoisy && uniform01(label_eng) < 0.5) y = it.bad;
      task.train.push_back({prompt(it.x), answer(std::move(y))});
      task.train_bad.push_back(answer(it.bad));
    } else {
      task.test.push_back({prompt(it.x), answer(it.y)});
      task.test_bad.push_back(answer(it.bad));
    }
  }
  return task;
}

// ---------------------------------------------------------------------------
// persistence: JSON lines, header then one record per example

inline void save_task(const SyntheticTask& task, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open " + path + " for writing");
  nlohmann::ordered_json header = {
      {"format", "dft-task"}, {"version", 1}, {"name", to_string(task.name)}, {"vocab", task.vocab.names()}};
  os << header.dump() << '\n';
  auto emit = [&](const char* split, const std::vector<Example>& xs, const std::vector<TokenSequence>& bad) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      nlohmann::ordered_json rec = {{"split", split}, {"x", xs[i].x.ids}, {"y", xs[i].y.ids}, {"y_bad", bad[i].ids}};
      os << rec.dump() << '\n';
    }
  };
  emit("train", task.train, task.train_bad);
  emit("test", task.test, task.test_bad);
  if (!os) throw Error("write failed for " + path);
}

inline SyntheticTask load_task(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.empty()) throw FormatError(path + ": empty task file");
  SyntheticTask task;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "dft-task") throw FormatError(path + ": not a dft-task file");
    if (header.value("version", 0) != 1) throw FormatError(path + ": unsupported task version");
    task.name = parse_task_name(header.at("name").get<std::string>());
    task.vocab = Vocab(header.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      auto x = prompt(rec.at("x").get<Tokens>());
      auto y = answer(rec.at("y").get<Tokens>());
      auto bad = answer(rec.at("y_bad").get<Tokens>());
      check_tokens(x.ids, task.vocab.size());
      check_tokens(y.ids, task.vocab.size());
      check_tokens(bad.ids, task.vocab.size());
      if (!y.terminated() || !bad.terminated()) throw FormatError("answers must be terminated");
      const auto split = rec.at("split").get<std::string>();
      if (split == "train") {
        task.train.push_back({std::move(x), std::move(y)});
        task.train_bad.push_back(std::move(bad));
      } else if (split == "test") {
        task.test.push_back({std::move(x), std::move(y)});
        task.test_bad.push_back(std::move(bad));
      } else {
        throw FormatError("unknown split '" + split + "'");
      }
    } catch (const std::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (task.train.empty()) throw FormatError(path + ": no training examples");
  return task;
}

}  // namespace dft
