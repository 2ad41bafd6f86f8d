#pragma once

// Pre-computed teacher outputs for fixed-teacher distillation: logits and the
// explanation for the teacher's top class, both at base (un-augmented)
// geometry. Write-once; lookups are read-only afterwards.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "e2kd/data.hpp"
#include "e2kd/explain.hpp"
#include "e2kd/nets.hpp"

namespace e2kd {

struct FrozenRecord {
  std::string sample_id;
  torch::Tensor teacher_logits;  // [classes]
  ExplanationMap explanation;    // base geometry, class = argmax(teacher_logits)
  std::pair<int64_t, int64_t> base_size;
};

class FrozenStore {
 public:
  size_t size() const { return records_.size(); }
  bool contains(const std::string& sample_id) const { return index_.count(sample_id) > 0; }
  /// Throws DataError naming the sample when absent.
  const FrozenRecord& at(const std::string& sample_id) const;
  const std::vector<FrozenRecord>& records() const { return records_; }

  /// model_id, teacher digest, method, dataset fingerprint, counts.
  const json& manifest() const { return manifest_; }

  /// Atomic write of one archive (index + stacked arrays + manifest).
  void save(const std::filesystem::path& path) const;
  /// Throws StorageError for unreadable or malformed files.
  static FrozenStore load(const std::filesystem::path& path);

 private:
  friend FrozenStore freeze(const Model&, const Dataset&, ExplainMethod, int64_t);
  void add(FrozenRecord record);

  std::vector<FrozenRecord> records_;
  std::map<std::string, size_t> index_;
  json manifest_ = json::object();
};

/// One record per sample. The teacher must be in eval mode (StateError).
FrozenStore freeze(const Model& teacher, const Dataset& dataset, ExplainMethod method, int64_t batch_size = 32);

}  // namespace e2kd
