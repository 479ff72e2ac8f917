#pragma once

#include <algorithm>
#include <array>
#include <bitset>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/error.hpp"

namespace mtp {

enum class Task : std::uint8_t {
  kMlm,
  kTf,
  kTfIdf,
  kSbo,
  kTgs,
  kTcp,
  kCap,
  kTlp,
  kNsp,
  kAsp,
  kSo,
  kSdp,
  kScp,
  kQt,
  kFs,
};

inline constexpr std::size_t kTaskCount = 15;

inline constexpr std::array<Task, kTaskCount> kAllTasks = {
    Task::kMlm, Task::kTf,  Task::kTfIdf, Task::kSbo, Task::kTgs,
    Task::kTcp, Task::kCap, Task::kTlp,   Task::kNsp, Task::kAsp,
    Task::kSo,  Task::kSdp, Task::kScp,   Task::kQt,  Task::kFs};

inline constexpr std::array<std::string_view, kTaskCount> kTaskNames = {
    "MLM", "TF", "TF-IDF", "SBO", "TGS", "TCP", "Cap", "TLP",
    "NSP", "ASP", "SO", "SDP", "SCP", "QT", "FS"};

inline std::string_view task_name(Task t) { return kTaskNames[static_cast<std::size_t>(t)]; }

inline Task parse_task(std::string_view name) {
  auto norm = [](std::string_view s) {
    std::string out;
    for (char c : s) {
      if (c == '-' || c == '_') continue;
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
  };
  const std::string key = norm(name);
  for (std::size_t i = 0; i < kTaskCount; ++i) {
    if (norm(kTaskNames[i]) == key) return kAllTasks[i];
  }
  fail("unknown task '", name, "'");
}

// How a sentence-level task labels its row.
inline bool is_pair_task(Task t) {
  return t == Task::kNsp || t == Task::kAsp || t == Task::kSo || t == Task::kSdp;
}
inline bool needs_random_second_segment(Task t) {
  return t == Task::kNsp || t == Task::kAsp || t == Task::kSdp;
}
inline bool needs_continuation_pairing(Task t) { return t == Task::kQt || t == Task::kFs; }

// Small ordered set of tasks; iteration follows enum order.
class TaskSet {
 public:
  TaskSet() = default;
  TaskSet(std::initializer_list<Task> tasks) {
    for (Task t : tasks) insert(t);
  }
  template <typename It>
  TaskSet(It first, It last) {
    for (; first != last; ++first) insert(*first);
  }

  void insert(Task t) { bits_.set(static_cast<std::size_t>(t)); }
  void erase(Task t) { bits_.reset(static_cast<std::size_t>(t)); }
  bool contains(Task t) const { return bits_.test(static_cast<std::size_t>(t)); }
  bool empty() const { return bits_.none(); }
  std::size_t size() const { return bits_.count(); }
  std::uint32_t mask() const { return static_cast<std::uint32_t>(bits_.to_ulong()); }

  std::vector<Task> tasks() const {
    std::vector<Task> out;
    for (Task t : kAllTasks)
      if (contains(t)) out.push_back(t);
    return out;
  }

  bool any(bool (*pred)(Task)) const {
    auto ts = tasks();
    return std::any_of(ts.begin(), ts.end(), pred);
  }

  std::string to_string(char sep = ',') const {
    std::string s;
    for (Task t : tasks()) {
      if (!s.empty()) s += sep;
      s += task_name(t);
    }
    return s;
  }

  friend bool operator==(const TaskSet&, const TaskSet&) = default;

 private:
  std::bitset<kTaskCount> bits_;
};

inline std::vector<Task> parse_task_list(std::string_view list) {
  std::vector<Task> out;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    auto comma = list.find(',', pos);
    auto item = list.substr(pos, comma == std::string_view::npos ? std::string_view::npos
                                                                  : comma - pos);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
    if (!item.empty()) {
      Task t = parse_task(item);
      if (std::find(out.begin(), out.end(), t) != out.end()) fail("duplicate task '", item, "'");
      out.push_back(t);
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace mtp
