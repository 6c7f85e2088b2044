#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "statechef/digest.hpp"
#include "statechef/errors.hpp"
#include "statechef/io.hpp"

namespace statechef {

/// The eleven training classes, in canonical index order.
inline constexpr std::array<std::string_view, 11> kCanonicalClasses = {
    "whole", "peeled", "floured", "sliced", "diced", "grated",
    "julienne", "juice", "creamy", "mixed", "other"};

inline constexpr std::string_view kOtherClass = "other";
inline constexpr std::size_t kFineStateCount = 22;
inline constexpr std::size_t kSelectedStateCount = 10;
inline constexpr std::array<std::string_view, 2> kHierarchyRoots = {"shape_change", "surface_change"};

/// Reference number of admissible states per object. Objects listed here must
/// match on load.
inline const std::map<std::string, std::size_t, std::less<>>& reference_state_counts() {
  static const std::map<std::string, std::size_t, std::less<>> counts = {
      {"mushroom", 3}, {"onion", 7},  {"strawberry", 4}, {"bread", 6},     {"butter", 5}, {"carrot", 8},
      {"egg", 5},      {"garlic", 5}, {"lemon", 6},      {"milk", 2},      {"pepper", 5}, {"potato", 8},
      {"tomato", 7},   {"cheese", 4}, {"beef/pork", 5},  {"chicken", 6}};
  return counts;
}

struct HierarchyNode {
  std::string name;
  std::string parent;  // empty for a root
  bool operator==(const HierarchyNode&) const = default;
};

struct FineState {
  std::string name;
  std::string parent;
  bool selected = false;
  bool operator==(const FineState&) const = default;
};

struct StateClass {
  std::string name;
  int index = 0;
  std::vector<std::string> fine_members;
  std::vector<std::string> synonyms;
  bool operator==(const StateClass&) const = default;
};

struct ObjectCategory {
  std::string name;
  std::vector<std::string> admissible;  // class names, canonical index order
  std::vector<std::string> aliases;
  std::string note;

  std::size_t state_count() const { return admissible.size(); }
  bool operator==(const ObjectCategory&) const = default;
};

/// Immutable, validated state hierarchy plus the per-object state mapping.
class Taxonomy {
 public:
  static Taxonomy from_json(const json& doc);

  static Taxonomy load(const std::filesystem::path& path) {
    const json doc = read_json_file(path);
    try {
      return from_json(doc);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }

  json to_json() const;
  void save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }

  const std::vector<HierarchyNode>& hierarchy() const { return hierarchy_; }
  const std::vector<FineState>& fine_states() const { return fine_states_; }
  const std::vector<StateClass>& classes() const { return classes_; }
  const std::vector<ObjectCategory>& objects() const { return objects_; }

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (const auto& c : classes_) names.push_back(c.name);
    return names;
  }

  std::size_t class_count() const { return classes_.size(); }

  /// Class index for a class name or one of its synonyms.
  std::optional<int> find_class(std::string_view name) const {
    for (const auto& c : classes_) {
      if (c.name == name) return c.index;
      for (const auto& s : c.synonyms)
        if (s == name) return c.index;
    }
    return std::nullopt;
  }

  int class_index(std::string_view name) const {
    if (auto i = find_class(name)) return *i;
    throw NotFoundError("unknown state class '" + std::string(name) + "'");
  }

  /// Canonical class name for a class name or synonym.
  const std::string& canonical_state(std::string_view name) const {
    return classes_[static_cast<std::size_t>(class_index(name))].name;
  }

  const ObjectCategory* find_object(std::string_view name) const {
    for (const auto& o : objects_) {
      if (o.name == name) return &o;
      if (std::find(o.aliases.begin(), o.aliases.end(), name) != o.aliases.end()) return &o;
    }
    return nullptr;
  }

  const ObjectCategory& object(std::string_view name) const {
    if (const auto* o = find_object(name)) return *o;
    throw NotFoundError("unknown object '" + std::string(name) + "'");
  }

  std::vector<StateClass> admissible_states(std::string_view object_name) const {
    std::vector<StateClass> out;
    for (const auto& s : object(object_name).admissible)
      out.push_back(classes_[static_cast<std::size_t>(class_index(s))]);
    return out;
  }

  bool is_admissible(std::string_view object_name, std::string_view state) const {
    const auto& o = object(object_name);
    const auto idx = find_class(state);
    if (!idx) return false;
    const auto& cname = classes_[static_cast<std::size_t>(*idx)].name;
    return std::find(o.admissible.begin(), o.admissible.end(), cname) != o.admissible.end();
  }

  /// Content hash of the canonical serialization.
  const std::string& version() const { return version_; }

  bool operator==(const Taxonomy& other) const {
    return hierarchy_ == other.hierarchy_ && fine_states_ == other.fine_states_ && classes_ == other.classes_ &&
           objects_ == other.objects_;
  }

 private:
  void validate() const;

  std::vector<HierarchyNode> hierarchy_;
  std::vector<FineState> fine_states_;
  std::vector<StateClass> classes_;
  std::vector<ObjectCategory> objects_;
  std::string version_;
};

namespace detail {

inline std::string require_string(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_string())
    throw DataError(where + ": missing string field '" + key + "'");
  return j.at(key).get<std::string>();
}

inline std::vector<std::string> string_list(const json& j, const char* key, const std::string& where,
                                            bool required) {
  if (!j.contains(key)) {
    if (required) throw DataError(where + ": missing array field '" + key + "'");
    return {};
  }
  const auto& arr = j.at(key);
  if (!arr.is_array()) throw DataError(where + ": field '" + key + "' must be an array");
  std::vector<std::string> out;
  for (const auto& v : arr) {
    if (!v.is_string()) throw DataError(where + ": '" + key + "' entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline const json& require_array(const json& doc, const char* key) {
  if (!doc.is_object() || !doc.contains(key) || !doc.at(key).is_array())
    throw DataError(std::string("taxonomy: missing array '") + key + "'");
  return doc.at(key);
}

}  // namespace detail

inline Taxonomy Taxonomy::from_json(const json& doc) {
  Taxonomy t;
  std::map<std::string, std::string> first_parent;

  for (const auto& n : detail::require_array(doc, "hierarchy")) {
    HierarchyNode node;
    node.name = detail::require_string(n, "name", "hierarchy node");
    if (n.contains("parent") && !n.at("parent").is_null()) {
      if (!n.at("parent").is_string())
        throw DataError("hierarchy node '" + node.name + "': tree violation, parent must be a single node");
      node.parent = n.at("parent").get<std::string>();
    }
    t.hierarchy_.push_back(std::move(node));
  }

  for (const auto& f : detail::require_array(doc, "fine_states")) {
    FineState fs;
    fs.name = detail::require_string(f, "name", "fine state");
    if (f.contains("parent") && f.at("parent").is_array()) {
      throw DataError("fine state '" + fs.name + "': tree violation, " + std::to_string(f.at("parent").size()) +
                      " parents listed");
    }
    fs.parent = detail::require_string(f, "parent", "fine state '" + fs.name + "'");
    if (!f.contains("selected") || !f.at("selected").is_boolean())
      throw DataError("fine state '" + fs.name + "': missing boolean 'selected'");
    fs.selected = f.at("selected").get<bool>();
    if (auto it = first_parent.find(fs.name); it != first_parent.end()) {
      if (it->second != fs.parent)
        throw DataError("fine state '" + fs.name + "': tree violation, two parents ('" + it->second + "' and '" +
                        fs.parent + "')");
      throw DataError("fine state '" + fs.name + "': duplicate state");
    }
    first_parent.emplace(fs.name, fs.parent);
    t.fine_states_.push_back(std::move(fs));
  }

  for (const auto& c : detail::require_array(doc, "classes")) {
    StateClass sc;
    sc.name = detail::require_string(c, "name", "class");
    if (!c.contains("index") || !c.at("index").is_number_integer())
      throw DataError("class '" + sc.name + "': missing integer 'index'");
    sc.index = c.at("index").get<int>();
    sc.fine_members = detail::string_list(c, "fine_members", "class '" + sc.name + "'", true);
    sc.synonyms = detail::string_list(c, "synonyms", "class '" + sc.name + "'", false);
    t.classes_.push_back(std::move(sc));
  }
  std::sort(t.classes_.begin(), t.classes_.end(),
            [](const StateClass& a, const StateClass& b) { return a.index < b.index; });

  for (const auto& o : detail::require_array(doc, "objects")) {
    ObjectCategory oc;
    oc.name = detail::require_string(o, "name", "object");
    oc.admissible = detail::string_list(o, "admissible", "object '" + oc.name + "'", true);
    oc.aliases = detail::string_list(o, "aliases", "object '" + oc.name + "'", false);
    if (o.contains("note") && o.at("note").is_string()) oc.note = o.at("note").get<std::string>();
    t.objects_.push_back(std::move(oc));
  }

  t.validate();

  // Admissible lists are normalized to canonical class order.
  for (auto& o : t.objects_) {
    std::sort(o.admissible.begin(), o.admissible.end(),
              [&](const std::string& a, const std::string& b) { return t.class_index(a) < t.class_index(b); });
  }
  t.version_ = sha256_hex(t.to_json().dump());
  return t;
}

inline void Taxonomy::validate() const {
  // Hierarchy: unique names, exactly the two canonical roots, no dangling parents, acyclic.
  std::map<std::string, std::string> parent_of;
  for (const auto& n : hierarchy_) {
    if (!parent_of.emplace(n.name, n.parent).second)
      throw DataError("hierarchy node '" + n.name + "': duplicate node");
  }
  std::set<std::string> roots;
  for (const auto& n : hierarchy_) {
    if (n.parent.empty()) {
      roots.insert(n.name);
    } else if (!parent_of.contains(n.parent)) {
      throw DataError("hierarchy node '" + n.name + "': orphan node, parent '" + n.parent + "' does not exist");
    }
  }
  const std::set<std::string> expected_roots(kHierarchyRoots.begin(), kHierarchyRoots.end());
  if (roots != expected_roots)
    throw DataError("hierarchy must be rooted at exactly {shape_change, surface_change}");
  for (const auto& n : hierarchy_) {
    std::string cur = n.name;
    for (std::size_t steps = 0; !cur.empty(); ++steps) {
      if (steps > hierarchy_.size()) throw DataError("hierarchy node '" + n.name + "': cycle detected");
      cur = parent_of.at(cur);
    }
  }

  std::size_t selected = 0;
  std::set<std::string> selected_names;
  for (const auto& f : fine_states_) {
    if (parent_of.contains(f.name))
      throw DataError("fine state '" + f.name + "': name collides with a hierarchy node");
    if (!parent_of.contains(f.parent))
      throw DataError("fine state '" + f.name + "': orphan node, parent '" + f.parent + "' does not exist");
    if (f.selected) {
      ++selected;
      selected_names.insert(f.name);
    }
  }
  if (fine_states_.size() != kFineStateCount)
    throw DataError("fine state count mismatch: expected " + std::to_string(kFineStateCount) + ", found " +
                    std::to_string(fine_states_.size()));
  if (selected != kSelectedStateCount)
    throw DataError("selected fine state count mismatch: expected " + std::to_string(kSelectedStateCount) +
                    ", found " + std::to_string(selected));

  if (classes_.size() != kCanonicalClasses.size())
    throw DataError("class count mismatch: expected 11, found " + std::to_string(classes_.size()));
  std::set<std::string> covered;
  std::set<std::string> labels;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto& c = classes_[i];
    if (c.index != static_cast<int>(i) || c.name != kCanonicalClasses[i])
      throw DataError("class '" + c.name + "' (index " + std::to_string(c.index) + "): expected '" +
                      std::string(kCanonicalClasses[i]) + "' at index " + std::to_string(i));
    if (c.name == kOtherClass) {
      if (!c.fine_members.empty()) throw DataError("class 'other' must not have fine members");
    } else if (c.fine_members.size() != 1) {
      throw DataError("class '" + c.name + "': expected exactly one selected fine member");
    }
    for (const auto& m : c.fine_members) {
      if (!selected_names.contains(m))
        throw DataError("class '" + c.name + "': fine member '" + m + "' is not a selected fine state");
      if (!covered.insert(m).second) throw DataError("fine state '" + m + "' is a member of two classes");
    }
    labels.insert(c.name);
  }
  for (const auto& c : classes_) {
    for (const auto& s : c.synonyms) {
      if (!labels.insert(s).second)
        throw DataError("class '" + c.name + "': synonym '" + s + "' is ambiguous");
    }
  }

  std::set<std::string> object_names;
  std::set<std::string> union_states;
  for (const auto& o : objects_) {
    if (!object_names.insert(o.name).second) throw DataError("object '" + o.name + "': duplicate object");
    for (const auto& a : o.aliases)
      if (!object_names.insert(a).second) throw DataError("object '" + o.name + "': alias '" + a + "' is ambiguous");
    if (o.admissible.empty()) throw DataError("object '" + o.name + "': no admissible states");
    std::set<std::string> seen;
    for (const auto& s : o.admissible) {
      if (std::find(kCanonicalClasses.begin(), kCanonicalClasses.end(), s) == kCanonicalClasses.end())
        throw DataError("object '" + o.name + "': admissible state '" + s + "' is not a class");
      if (!seen.insert(s).second) throw DataError("object '" + o.name + "': state '" + s + "' listed twice");
      union_states.insert(s);
    }
    const auto& ref = reference_state_counts();
    if (auto it = ref.find(o.name); it != ref.end() && it->second != o.admissible.size())
      throw DataError("object '" + o.name + "': state count " + std::to_string(o.admissible.size()) +
                      " does not match reference count " + std::to_string(it->second));
  }
  if (union_states.size() != kCanonicalClasses.size())
    throw DataError("admissible states over all objects cover " + std::to_string(union_states.size()) +
                    " of 11 classes");
}

inline json Taxonomy::to_json() const {
  json doc;
  doc["version"] = 1;
  doc["hierarchy"] = json::array();
  for (const auto& n : hierarchy_) {
    doc["hierarchy"].push_back({{"name", n.name}, {"parent", n.parent.empty() ? json(nullptr) : json(n.parent)}});
  }
  doc["fine_states"] = json::array();
  for (const auto& f : fine_states_)
    doc["fine_states"].push_back({{"name", f.name}, {"parent", f.parent}, {"selected", f.selected}});
  doc["classes"] = json::array();
  for (const auto& c : classes_) {
    doc["classes"].push_back(
        {{"name", c.name}, {"index", c.index}, {"fine_members", c.fine_members}, {"synonyms", c.synonyms}});
  }
  doc["objects"] = json::array();
  for (const auto& o : objects_) {
    json jo = {{"name", o.name}, {"admissible", o.admissible}};
    if (!o.aliases.empty()) jo["aliases"] = o.aliases;
    if (!o.note.empty()) jo["note"] = o.note;
    doc["objects"].push_back(std::move(jo));
  }
  return doc;
}

}  // namespace statechef
