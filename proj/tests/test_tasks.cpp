#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "dft/tasks.hpp"

namespace dft {
namespace {

int number(const Vocab& v, TokenId hi, TokenId lo) { return std::stoi(v.name(hi)) * 10 + std::stoi(v.name(lo)); }

TEST(MakeTask, Deterministic) {
  for (auto name : {TaskName::kCompareNumbers, TaskName::kCopyPattern, TaskName::kKeyValueRecall}) {
    auto a = make_task(name, 10, 7);
    auto b = make_task(name, 10, 7);
    ASSERT_EQ(a.train.size(), 10u);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      EXPECT_EQ(a.train[i].x, b.train[i].x);
      EXPECT_EQ(a.train[i].y, b.train[i].y);
      EXPECT_EQ(a.train_bad[i], b.train_bad[i]);
    }
  }
}

TEST(MakeTask, RejectsTinySizes) { EXPECT_THROW(make_task(TaskName::kCompareNumbers, 9, 1), InputError); }

TEST(MakeTask, BadAnswersDifferAndSplitsAreDisjoint) {
  for (auto name : {TaskName::kCompareNumbers, TaskName::kCopyPattern, TaskName::kKeyValueRecall}) {
    auto t = make_task(name, 200, 3);
    EXPECT_EQ(t.test.size(), test_split_size(200));
    std::set<Tokens> train_prompts;
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      EXPECT_NE(t.train[i].y.ids, t.train_bad[i].ids);
      EXPECT_TRUE(t.train[i].y.terminated());
      train_prompts.insert(t.train[i].x.ids);
    }
    EXPECT_EQ(train_prompts.size(), t.train.size());
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      EXPECT_NE(t.test[i].y.ids, t.test_bad[i].ids);
      EXPECT_EQ(train_prompts.count(t.test[i].x.ids), 0u) << to_string(name);
    }
  }
}

// Integer comparison of the two decoded operands decides every label.
TEST(MakeTask, CompareNumbersLabels) {
  auto t = make_task(TaskName::kCompareNumbers, 500, 11);
  const auto& v = t.vocab;
  auto check = [&](const Example& ex, const TokenSequence& bad) {
    ASSERT_EQ(ex.x.size(), 5u);
    EXPECT_EQ(v.name(ex.x.ids[2]), "?");
    const int a = number(v, ex.x.ids[0], ex.x.ids[1]);
    const int b = number(v, ex.x.ids[3], ex.x.ids[4]);
    ASSERT_NE(a, b);
    ASSERT_EQ(ex.y.size(), 3u);
    EXPECT_EQ(number(v, ex.y.ids[0], ex.y.ids[1]), a > b ? a : b);
    EXPECT_EQ(number(v, bad.ids[0], bad.ids[1]), a > b ? b : a);
  };
  for (std::size_t i = 0; i < t.train.size(); ++i) check(t.train[i], t.train_bad[i]);
  for (std::size_t i = 0; i < t.test.size(); ++i) check(t.test[i], t.test_bad[i]);
  EXPECT_EQ(t.max_answer_len(), 3u);
}

TEST(MakeTask, CopyPatternAndRecallLabels) {
  auto c = make_task(TaskName::kCopyPattern, 50, 2);
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    Tokens pat(c.train[i].x.ids.begin(), c.train[i].x.ids.end() - 1);
    Tokens want = pat;
    want.push_back(kEos);
    EXPECT_EQ(c.train[i].y.ids, want);
    Tokens rev(pat.rbegin(), pat.rend());
    rev.push_back(kEos);
    EXPECT_EQ(c.train_bad[i].ids, rev);
  }
  auto k = make_task(TaskName::kKeyValueRecall, 50, 2);
  for (std::size_t i = 0; i < k.train.size(); ++i) {
    const auto& x = k.train[i].x.ids;
    ASSERT_EQ(x.size(), 8u);
    TokenId value = 0;
    for (std::size_t j = 0; j < 6; j += 2)
      if (x[j] == x[7]) value = x[j + 1];
    EXPECT_EQ(k.train[i].y.ids, (Tokens{value, kEos}));
  }
}

TEST(MakeTask, NoisyLabelsKeepPromptsAndTestAnswers) {
  auto clean = make_task(TaskName::kCompareNumbers, 400, 5);
  auto noisy = make_task(TaskName::kCompareNumbers, 400, 5, Labels::kNoisy);
  std::size_t swapped = 0;
  for (std::size_t i = 0; i < clean.train.size(); ++i) {
    EXPECT_EQ(clean.train[i].x, noisy.train[i].x);
    if (noisy.train[i].y == clean.train_bad[i]) ++swapped;
    else EXPECT_EQ(noisy.train[i].y, clean.train[i].y);
  }
  EXPECT_GT(swapped, 150u);
  EXPECT_LT(swapped, 250u);
  for (std::size_t i = 0; i < clean.test.size(); ++i) EXPECT_EQ(clean.test[i].y, noisy.test[i].y);
}

TEST(TaskFile, RoundTrip) {
  auto t = make_task(TaskName::kKeyValueRecall, 30, 4);
  const auto path = (std::filesystem::temp_directory_path() / "dft_task_roundtrip.jsonl").string();
  save_task(t, path);
  auto back = load_task(path);
  EXPECT_EQ(back.name, t.name);
  EXPECT_EQ(back.vocab.names(), t.vocab.names());
  ASSERT_EQ(back.train.size(), t.train.size());
  ASSERT_EQ(back.test.size(), t.test.size());
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    EXPECT_EQ(back.train[i].x, t.train[i].x);
    EXPECT_EQ(back.train[i].y, t.train[i].y);
    EXPECT_EQ(back.train_bad[i], t.train_bad[i]);
  }
  std::filesystem::remove(path);
}

TEST(TaskName, Parse) {
  EXPECT_EQ(parse_task_name("CopyPattern"), TaskName::kCopyPattern);
  EXPECT_THROW(parse_task_name("Sorting"), InputError);
}

}  // namespace
}  // namespace dft
