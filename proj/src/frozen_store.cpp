#include "e2kd/frozen_store.hpp"

#include "e2kd/archive.hpp"
#include "e2kd/errors.hpp"

namespace e2kd {

const FrozenRecord& FrozenStore::at(const std::string& sample_id) const {
  auto it = index_.find(sample_id);
  if (it == index_.end()) throw DataError("frozen store: no record for sample '" + sample_id + "'");
  return records_[it->second];
}

void FrozenStore::add(FrozenRecord record) {
  if (!index_.emplace(record.sample_id, records_.size()).second) {
    throw DataError("frozen store: duplicate sample '" + record.sample_id + "'");
  }
  records_.push_back(std::move(record));
}

FrozenStore freeze(const Model& teacher, const Dataset& dataset, ExplainMethod method, int64_t batch_size) {
  if (teacher.mode() != Mode::Eval) throw StateError("freeze: teacher must be in eval mode");
  check_compatible(teacher.family(), method);
  if (dataset.samples.empty()) throw DataError("freeze: dataset is empty");
  FrozenStore store;
  const auto n = static_cast<int64_t>(dataset.size());
  const auto h = dataset.samples.front().image.size(1), w = dataset.samples.front().image.size(2);
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto input = prepare_input(teacher, dataset.images(idx));
    torch::Tensor logits;
    {
      torch::NoGradGuard no_grad;
      logits = teacher.forward(input);
    }
    auto cls = logits.argmax(1);
    auto maps = explain_batch(teacher, input, cls, method, false);
    for (size_t k = 0; k < idx.size(); ++k) {
      const auto& s = dataset.samples[idx[k]];
      const auto i = static_cast<int64_t>(k);
      store.add({s.sample_id, logits[i].clone(),
                 ExplanationMap{maps[i].clone(), cls[i].item<int64_t>(), method, teacher.model_id()}, {h, w}});
    }
  }
  store.manifest_ = {{"format", "e2kd-frozen-store"},
                     {"model_id", teacher.model_id()},
                     {"teacher_digest", teacher.digest()},
                     {"method", to_string(method)},
                     {"dataset", dataset.name},
                     {"dataset_fingerprint", dataset_fingerprint(dataset)},
                     {"count", store.size()},
                     {"base_size", {h, w}}};
  return store;
}

void FrozenStore::save(const std::filesystem::path& path) const {
  if (records_.empty()) throw StorageError("frozen store: nothing to save");
  ArchiveWriter w;
  json meta = manifest_;
  json ids = json::array(), classes = json::array();
  std::vector<torch::Tensor> logits, maps;
  for (const auto& r : records_) {
    ids.push_back(r.sample_id);
    classes.push_back(r.explanation.class_id);
    logits.push_back(r.teacher_logits);
    maps.push_back(r.explanation.values);
  }
  meta["index"] = ids;
  meta["class_ids"] = classes;
  w.set_meta(std::move(meta));
  w.add("logits", torch::stack(logits));
  w.add("maps", torch::stack(maps));
  try {
    w.write(path);
  } catch (const StorageError& e) {
    throw StorageError(std::string(e.what()) + " (frozen store, last sample '" + records_.back().sample_id + "')");
  }
}

FrozenStore FrozenStore::load(const std::filesystem::path& path) {
  auto ar = Archive::read(path);
  const auto& meta = ar.meta();
  if (meta.value("format", "") != "e2kd-frozen-store") {
    throw StorageError("frozen store: '" + path.string() + "' is not a frozen store archive");
  }
  FrozenStore store;
  try {
    const auto method = explain_method_from_string(meta.at("method").get<std::string>());
    const auto model_id = meta.at("model_id").get<std::string>();
    const auto base = meta.at("base_size").get<std::vector<int64_t>>();
    auto logits = ar.get("logits");
    auto maps = ar.get("maps");
    const auto& ids = meta.at("index");
    const auto& classes = meta.at("class_ids");
    if (static_cast<int64_t>(ids.size()) != logits.size(0) || logits.size(0) != maps.size(0)) {
      throw StorageError("frozen store: index and arrays disagree in '" + path.string() + "'");
    }
    for (size_t i = 0; i < ids.size(); ++i) {
      const auto k = static_cast<int64_t>(i);
      store.add({ids[i].get<std::string>(), logits[k].clone(),
                 ExplanationMap{maps[k].clone(), classes[i].get<int64_t>(), method, model_id}, {base.at(0), base.at(1)}});
    }
    store.manifest_ = meta;
    store.manifest_.erase("index");
    store.manifest_.erase("class_ids");
  } catch (const json::exception& e) {
    throw StorageError("frozen store: malformed manifest in '" + path.string() + "': " + e.what());
  }
  return store;
}

}  // namespace e2kd
