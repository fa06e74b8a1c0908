#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "peace/data/dataset.hpp"

namespace peace {

/// File names inside a bundle directory.
struct BundleFiles {
  static constexpr const char* graph = "graph.tsv";
  static constexpr const char* features = "features.tsv";
  static constexpr const char* item_entities = "item_entities.tsv";
  static constexpr const char* interactions = "interactions.tsv";
  static constexpr const char* profiles = "profiles.tsv";
  static constexpr const char* schema = "schema.tsv";
  static constexpr const char* domains = "domains.tsv";
  static constexpr const char* truth = "truth.tsv";
};

struct LoadOptions {
  std::size_t max_behaviors = 200;
};

namespace io_detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw RuntimeError("cannot open " + path.string());
  }

  bool next() {
    while (std::getline(in_, line_)) {
      ++number_;
      if (!line_.empty() && line_.back() == '\r') line_.pop_back();
      if (!line_.empty()) return true;
    }
    return false;
  }

  const std::string& line() const { return line_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw ValidationError(path_.filename().string() + ":" + std::to_string(number_) + ": " + what);
  }

  std::vector<std::string_view> fields(std::size_t expected) const {
    auto f = split(line_, '\t');
    if (f.size() != expected) {
      fail("expected " + std::to_string(expected) + " tab-separated fields, got " +
           std::to_string(f.size()));
    }
    return f;
  }

  template <class Int>
  Int integer(std::string_view s, const char* what) const {
    Int v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
      fail(std::string("bad ") + what + " '" + std::string(s) + "'");
    }
    return v;
  }

  std::size_t id(std::string_view s, const char* what) const {
    if (!s.empty() && s.front() == '-') fail(std::string("negative ") + what);
    return integer<std::size_t>(s, what);
  }

  double real(std::string_view s) const {
    double v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
      fail("bad feature value '" + std::string(s) + "'");
    }
    return v;
  }

  std::vector<std::size_t> id_list(std::string_view s, const char* what) const {
    std::vector<std::size_t> out;
    if (s.empty()) return out;
    for (auto part : split(s, ',')) out.push_back(id(part, what));
    return out;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::string line_;
  std::size_t number_ = 0;
};

inline std::string format_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string join(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + p.string());
  return out;
}

}  // namespace io_detail

/// Checks every cross-file invariant of a bundle.
inline void validate_bundle(const DatasetBundle& b, const LoadOptions& opt = {}) {
  const auto& g = b.graph;
  if (g.features.rows() != g.entity_count || g.features.cols() != kFeatureDim) {
    throw ValidationError("features must be entity_count x 32");
  }
  if (!g.features.all_finite()) throw ValidationError("non-finite entity feature");
  std::set<Triplet> seen;
  for (const auto& t : g.triplets) {
    if (t.head >= g.entity_count || t.tail >= g.entity_count || t.relation >= g.relation_count) {
      throw ValidationError("triplet id out of range");
    }
    if (!seen.insert(t).second) throw ValidationError("duplicate triplet");
  }
  for (const auto& [item, ents] : b.item_entities.entities_of) {
    if (ents.empty() || ents.size() > kMaxEntitiesPerItem) {
      throw ValidationError("item " + std::to_string(item) + " maps to " + std::to_string(ents.size()) +
                            " entities (allowed 1..3)");
    }
    for (auto e : ents)
      if (e >= g.entity_count) throw ValidationError("item " + std::to_string(item) + ": entity id out of range");
  }
  std::set<std::size_t> source_items, target_items;
  auto check_records = [&](const auto& per_domain, DomainRole role, std::set<std::size_t>& items) {
    for (const auto& [d, recs] : per_domain) {
      auto it = b.domains.find(d);
      if (it == b.domains.end() || it->second != role) throw ValidationError("undeclared domain " + std::to_string(d));
      for (const auto& r : recs) {
        if (r.label != 0 && r.label != 1) throw ValidationError("label binary");
        if (r.behaviors.size() > opt.max_behaviors) throw ValidationError("behavior list exceeds sequence cap");
        if (!b.item_entities.contains(r.item)) throw ValidationError("item " + std::to_string(r.item) + " is not mapped");
        for (auto bi : r.behaviors)
          if (!b.item_entities.contains(bi)) throw ValidationError("behavior item " + std::to_string(bi) + " is not mapped");
        items.insert(r.item);
      }
    }
  };
  check_records(b.source_records, DomainRole::source, source_items);
  check_records(b.target_records, DomainRole::target, target_items);
  for (auto i : target_items) {
    if (source_items.count(i)) {
      throw ValidationError("item " + std::to_string(i) + " appears in both source and target domains");
    }
  }
  auto check_profiles = [&](const std::map<std::size_t, FieldValues>& m, Side side) {
    for (const auto& [id, fv] : m)
      for (const auto& [f, v] : fv) {
        const FieldSpec* spec = b.schema.find(f);
        if (!spec || spec->side != side) throw ValidationError("profile field " + std::to_string(f) + " not declared for this side");
        if (v >= spec->cardinality) throw ValidationError("profile value out of range for field " + std::to_string(f));
      }
  };
  check_profiles(b.profiles.users, Side::user);
  check_profiles(b.profiles.items, Side::item);
  if (b.truth && b.truth->size() != g.entity_count) throw ValidationError("truth must cover every entity");
}

/// Loads and validates a bundle directory. Every rejection names the file
/// and line.
inline DatasetBundle load_bundle(const std::filesystem::path& dir, const LoadOptions& opt = {}) {
  using io_detail::LineReader;
  DatasetBundle b;

  {
    LineReader in(dir / BundleFiles::domains);
    while (in.next()) {
      auto f = in.fields(2);
      std::size_t d = in.id(f[0], "domain id");
      DomainRole role;
      if (f[1] == "source") role = DomainRole::source;
      else if (f[1] == "target") role = DomainRole::target;
      else in.fail("domain role must be source or target");
      if (!b.domains.emplace(d, role).second) in.fail("duplicate domain " + std::to_string(d));
    }
  }

  {
    LineReader in(dir / BundleFiles::features);
    std::vector<std::vector<double>> rows;
    std::vector<bool> present;
    while (in.next()) {
      auto f = in.fields(2);
      std::size_t e = in.id(f[0], "entity id");
      auto parts = io_detail::split(f[1], ',');
      if (parts.size() != kFeatureDim) in.fail("entity feature must have 32 values");
      if (e >= rows.size()) {
        rows.resize(e + 1);
        present.resize(e + 1, false);
      }
      if (present[e]) in.fail("duplicate entity " + std::to_string(e));
      present[e] = true;
      for (auto p : parts) rows[e].push_back(in.real(p));
    }
    for (std::size_t e = 0; e < rows.size(); ++e)
      if (!present[e]) throw ValidationError(std::string(BundleFiles::features) + ": entity " + std::to_string(e) + " missing");
    b.graph.entity_count = rows.size();
    b.graph.features = Tensor::matrix(rows.size(), kFeatureDim);
    for (std::size_t e = 0; e < rows.size(); ++e)
      std::copy(rows[e].begin(), rows[e].end(), b.graph.features.data() + e * kFeatureDim);
  }

  {
    LineReader in(dir / BundleFiles::graph);
    std::set<Triplet> seen;
    while (in.next()) {
      auto f = in.fields(3);
      Triplet t{in.id(f[0], "head id"), in.id(f[1], "relation id"), in.id(f[2], "tail id")};
      if (t.head >= b.graph.entity_count || t.tail >= b.graph.entity_count) in.fail("entity id out of range");
      if (!seen.insert(t).second) in.fail("duplicate triplet");
      b.graph.relation_count = std::max(b.graph.relation_count, t.relation + 1);
      b.graph.triplets.push_back(t);
    }
  }

  {
    LineReader in(dir / BundleFiles::item_entities);
    while (in.next()) {
      auto f = in.fields(2);
      std::size_t item = in.id(f[0], "item id");
      auto ents = in.id_list(f[1], "entity id");
      if (ents.empty() || ents.size() > kMaxEntitiesPerItem) {
        in.fail("item " + std::to_string(item) + " maps to " + std::to_string(ents.size()) +
                " entities (allowed 1..3)");
      }
      for (auto e : ents)
        if (e >= b.graph.entity_count) in.fail("item " + std::to_string(item) + ": entity id out of range");
      if (!b.item_entities.entities_of.emplace(item, std::move(ents)).second) in.fail("duplicate item " + std::to_string(item));
    }
  }

  {
    LineReader in(dir / BundleFiles::interactions);
    std::map<std::size_t, std::size_t> first_domain_of_item;
    while (in.next()) {
      auto f = in.fields(6);
      InteractionRecord r;
      r.domain = in.id(f[0], "domain id");
      r.user = in.id(f[1], "user id");
      r.item = in.id(f[2], "item id");
      r.behaviors = in.id_list(f[3], "behavior item id");
      long long label = in.integer<long long>(f[4], "label");
      if (label != 0 && label != 1) in.fail("label binary");
      r.label = static_cast<int>(label);
      r.timestamp = in.integer<std::int64_t>(f[5], "timestamp");
      auto dom = b.domains.find(r.domain);
      if (dom == b.domains.end()) in.fail("undeclared domain " + std::to_string(r.domain));
      if (r.behaviors.size() > opt.max_behaviors) in.fail("behavior list exceeds sequence cap");
      if (!b.item_entities.contains(r.item)) in.fail("item " + std::to_string(r.item) + " is not mapped");
      for (auto bi : r.behaviors)
        if (!b.item_entities.contains(bi)) in.fail("behavior item " + std::to_string(bi) + " is not mapped");
      auto [it, fresh] = first_domain_of_item.emplace(r.item, r.domain);
      if (!fresh && b.domains[it->second] != dom->second) {
        in.fail("item " + std::to_string(r.item) + " appears in both source and target domains");
      }
      auto& sink = dom->second == DomainRole::source ? b.source_records : b.target_records;
      sink[r.domain].push_back(std::move(r));
    }
  }

  if (std::filesystem::exists(dir / BundleFiles::schema)) {
    LineReader in(dir / BundleFiles::schema);
    while (in.next()) {
      auto f = in.fields(3);
      FieldSpec s;
      s.field = in.id(f[0], "field id");
      if (f[1] == "user") s.side = Side::user;
      else if (f[1] == "item") s.side = Side::item;
      else in.fail("field side must be user or item");
      s.cardinality = in.id(f[2], "cardinality");
      if (s.cardinality == 0) in.fail("cardinality must be positive");
      if (b.schema.find(s.field)) in.fail("duplicate field " + std::to_string(s.field));
      b.schema.fields.push_back(s);
    }
    std::sort(b.schema.fields.begin(), b.schema.fields.end(),
              [](const FieldSpec& a, const FieldSpec& c) { return a.field < c.field; });
  }

  if (std::filesystem::exists(dir / BundleFiles::profiles)) {
    LineReader in(dir / BundleFiles::profiles);
    while (in.next()) {
      auto f = in.fields(3);
      Side side;
      if (f[0] == "user") side = Side::user;
      else if (f[0] == "item") side = Side::item;
      else in.fail("profile kind must be item or user");
      std::size_t id = in.id(f[1], "profile id");
      FieldValues fv;
      if (!f[2].empty()) {
        for (auto part : io_detail::split(f[2], ',')) {
          auto kv = io_detail::split(part, ':');
          if (kv.size() != 2) in.fail("profile entry must be field_id:value_id");
          std::size_t field = in.id(kv[0], "field id");
          std::size_t value = in.id(kv[1], "value id");
          const FieldSpec* spec = b.schema.find(field);
          if (!spec || spec->side != side) in.fail("field " + std::to_string(field) + " not declared for this side");
          if (value >= spec->cardinality) in.fail("value out of range for field " + std::to_string(field));
          fv.emplace_back(field, value);
        }
      }
      auto& sink = side == Side::user ? b.profiles.users : b.profiles.items;
      if (!sink.emplace(id, std::move(fv)).second) in.fail("duplicate profile");
    }
  }

  if (std::filesystem::exists(dir / BundleFiles::truth)) {
    LineReader in(dir / BundleFiles::truth);
    std::vector<std::size_t> truth(b.graph.entity_count, 0);
    std::vector<bool> seen(b.graph.entity_count, false);
    while (in.next()) {
      auto f = in.fields(2);
      std::size_t e = in.id(f[0], "entity id");
      if (e >= truth.size()) in.fail("entity id out of range");
      truth[e] = in.id(f[1], "topic id");
      seen[e] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw ValidationError(std::string(BundleFiles::truth) + ": truth must cover every entity");
    }
    b.truth = std::move(truth);
  }

  validate_bundle(b, opt);
  return b;
}

/// Writes every bundle file. Feature values use shortest round-trip
/// formatting so save -> load is value-identical.
inline void save_bundle(const DatasetBundle& b, const std::filesystem::path& dir) {
  using namespace io_detail;
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / BundleFiles::domains);
    for (const auto& [d, role] : b.domains) out << d << '\t' << (role == DomainRole::source ? "source" : "target") << '\n';
  }
  {
    auto out = open_out(dir / BundleFiles::features);
    for (std::size_t e = 0; e < b.graph.entity_count; ++e) {
      out << e << '\t';
      for (std::size_t k = 0; k < kFeatureDim; ++k) {
        if (k) out << ',';
        out << format_double(b.graph.features.at(e, k));
      }
      out << '\n';
    }
  }
  {
    auto out = open_out(dir / BundleFiles::graph);
    for (const auto& t : b.graph.triplets) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  {
    auto out = open_out(dir / BundleFiles::item_entities);
    for (const auto& [item, ents] : b.item_entities.entities_of) out << item << '\t' << join(ents) << '\n';
  }
  {
    // Records are grouped by domain in ascending domain id; relative order
    // within a domain is preserved.
    std::map<std::size_t, const std::vector<InteractionRecord>*> all;
    for (const auto& [d, r] : b.source_records) all[d] = &r;
    for (const auto& [d, r] : b.target_records) all[d] = &r;
    auto out = open_out(dir / BundleFiles::interactions);
    for (const auto& [d, recs] : all)
      for (const auto& r : *recs)
        out << r.domain << '\t' << r.user << '\t' << r.item << '\t' << join(r.behaviors) << '\t' << r.label << '\t'
            << r.timestamp << '\n';
  }
  {
    auto out = open_out(dir / BundleFiles::schema);
    for (const auto& f : b.schema.fields)
      out << f.field << '\t' << (f.side == Side::user ? "user" : "item") << '\t' << f.cardinality << '\n';
  }
  {
    auto out = open_out(dir / BundleFiles::profiles);
    auto write = [&](const char* kind, const std::map<std::size_t, FieldValues>& m) {
      for (const auto& [id, fv] : m) {
        out << kind << '\t' << id << '\t';
        for (std::size_t i = 0; i < fv.size(); ++i) out << (i ? "," : "") << fv[i].first << ':' << fv[i].second;
        out << '\n';
      }
    };
    write("item", b.profiles.items);
    write("user", b.profiles.users);
  }
  std::filesystem::remove(dir / BundleFiles::truth);
  if (b.truth) {
    auto out = open_out(dir / BundleFiles::truth);
    for (std::size_t e = 0; e < b.truth->size(); ++e) out << e << '\t' << (*b.truth)[e] << '\n';
  }
}

}  // namespace peace
