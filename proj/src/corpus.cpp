#include "retro/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "retro/error.hpp"

namespace retro::corpus {
namespace {

RuleTable make_standard() {
  RuleTable t;
  t.actors = {"john", "tom", "mike", "sam", "paul", "jack", "mary", "anna", "lucy", "kate", "emma", "sara"};
  t.actor_female = {false, false, false, false, false, false, true, true, true, true, true, true};
  t.places = {"kitchen", "garden", "park", "office", "store", "beach"};
  t.events = {
      {"kitchen", "dropped", "glass", "swept", "vacuumed", "floor"},
      {"kitchen", "burned", "toast", "scraped", "opened", "window"},
      {"kitchen", "spilled", "milk", "wiped", "washed", "towel"},
      {"kitchen", "baked", "cake", "frosted", "invited", "neighbors"},
      {"kitchen", "chopped", "onion", "fried", "served", "soup"},
      {"garden", "planted", "seeds", "watered", "harvested", "tomatoes"},
      {"garden", "dug", "hole", "filled", "buried", "bone"},
      {"garden", "trimmed", "hedge", "raked", "emptied", "bin"},
      {"garden", "spotted", "snail", "moved", "protected", "lettuce"},
      {"garden", "mowed", "lawn", "bagged", "composted", "grass"},
      {"park", "flew", "kite", "chased", "climbed", "tree"},
      {"park", "fed", "ducks", "watched", "photographed", "pond"},
      {"park", "lost", "wallet", "searched", "called", "police"},
      {"park", "kicked", "ball", "followed", "repaired", "fence"},
      {"park", "met", "puppy", "hugged", "adopted", "dog"},
      {"office", "printed", "report", "stapled", "presented", "slides"},
      {"office", "forgot", "password", "reset", "contacted", "support"},
      {"office", "missed", "deadline", "finished", "emailed", "manager"},
      {"office", "jammed", "printer", "unplugged", "ordered", "toner"},
      {"office", "won", "award", "polished", "thanked", "team"},
      {"store", "tried", "jacket", "zipped", "purchased", "coat"},
      {"store", "tasted", "cheese", "liked", "packed", "basket"},
      {"store", "cracked", "eggs", "cleaned", "replaced", "carton"},
      {"store", "scanned", "coupon", "saved", "counted", "change"},
      {"store", "pushed", "cart", "steered", "loaded", "trunk"},
      {"beach", "built", "sandcastle", "decorated", "posted", "picture"},
      {"beach", "rented", "surfboard", "waxed", "rode", "waves"},
      {"beach", "collected", "shells", "rinsed", "made", "necklace"},
      {"beach", "caught", "fish", "grilled", "ate", "dinner"},
      {"beach", "inflated", "raft", "paddled", "crossed", "bay"},
  };
  t.adverbs = {"quickly", "slowly", "calmly", "carefully"};
  t.contacts = {"phoned", "texted", "told", "messaged"};
  t.whens = {"later", "today", "twice", "again"};
  return t;
}

template <typename C>
int index_of(const C& c, const std::string& v) {
  auto it = std::find(c.begin(), c.end(), v);
  return it == c.end() ? -1 : static_cast<int>(it - c.begin());
}

std::vector<std::string> words_of(const std::string& s) { return split_whitespace(s); }

}  // namespace

const RuleTable& RuleTable::standard() {
  static const RuleTable table = make_standard();
  return table;
}

std::vector<int> RuleTable::events_at(const std::string& place) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].place == place) out.push_back(static_cast<int>(i));
  }
  return out;
}

const std::string& RuleTable::pronoun(int actor) const {
  static const std::string he = "he", she = "she";
  return actor_female.at(static_cast<std::size_t>(actor)) ? she : he;
}

int RuleTable::actor_index(const std::string& name) const { return index_of(actors, name); }
int RuleTable::place_index(const std::string& name) const { return index_of(places, name); }

int RuleTable::event_index(const std::string& verb) const {
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].verb == verb) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::string> RuleTable::words() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) out.push_back(w);
  };
  for (const auto& a : actors) add(a);
  add("he");
  add("she");
  for (const char* w : {"went", "to", "the", "it", "."}) add(w);
  for (const auto& p : places) add(p);
  for (const auto& e : events) {
    add(e.verb);
    add(e.object);
    add(e.reaction);
    add(e.result_verb);
    add(e.result_object);
  }
  for (const auto& w : adverbs) add(w);
  for (const auto& w : contacts) add(w);
  for (const auto& w : whens) add(w);
  return out;
}

Vocab build_vocab(const RuleTable& rules) { return Vocab(rules.words()); }

std::array<std::string, 5> render(const StoryTags& g, const RuleTable& r) {
  const std::string& actor = r.actors.at(g.actor);
  const std::string& pron = r.pronoun(g.actor);
  const Event& e = r.events.at(g.event);
  return {
      actor + " went to the " + r.places.at(g.place) + " .",
      actor + " " + e.verb + " the " + e.object + " .",
      pron + " " + r.adverbs.at(g.adverb) + " " + e.reaction + " it .",
      pron + " " + r.contacts.at(g.contact) + " " + r.actors.at(g.friend_actor) + " " + r.whens.at(g.when) + " .",
      actor + " " + e.result_verb + " the " + e.result_object + " .",
  };
}

std::optional<StoryTags> parse_story(const std::array<std::string, 5>& s, const RuleTable& r) {
  const auto w1 = words_of(s[0]);
  const auto w2 = words_of(s[1]);
  const auto w3 = words_of(s[2]);
  const auto w4 = words_of(s[3]);
  if (w1.size() != 6 || w2.size() != 5 || w3.size() != 5 || w4.size() != 5) return std::nullopt;
  StoryTags g;
  g.actor = r.actor_index(w1[0]);
  g.place = r.place_index(w1[4]);
  g.event = r.event_index(w2[1]);
  g.adverb = index_of(r.adverbs, w3[1]);
  g.contact = index_of(r.contacts, w4[1]);
  g.friend_actor = r.actor_index(w4[2]);
  g.when = index_of(r.whens, w4[3]);
  if (g.actor < 0 || g.place < 0 || g.event < 0 || g.adverb < 0 || g.contact < 0 || g.friend_actor < 0 ||
      g.when < 0) {
    return std::nullopt;
  }
  if (g.friend_actor == g.actor) return std::nullopt;
  if (r.events[g.event].place != r.places[g.place]) return std::nullopt;
  if (render(g, r) != s) return std::nullopt;
  return g;
}

bool check_story(const std::array<std::string, 5>& sentences, const RuleTable& rules) {
  return parse_story(sentences, rules).has_value();
}

std::vector<Story> generate_corpus(int n_stories, std::uint64_t seed) {
  if (n_stories < 1) throw ConfigError("n_stories must be >= 1");
  const RuleTable& r = RuleTable::standard();
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t n) {
    return static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  };
  std::vector<Story> out;
  out.reserve(static_cast<std::size_t>(n_stories));
  for (int i = 0; i < n_stories; ++i) {
    StoryTags g;
    g.actor = pick(r.actors.size());
    g.place = pick(r.places.size());
    const auto evs = r.events_at(r.places[g.place]);
    g.event = evs[pick(evs.size())];
    g.adverb = pick(r.adverbs.size());
    g.contact = pick(r.contacts.size());
    g.friend_actor = pick(r.actors.size() - 1);
    if (g.friend_actor >= g.actor) ++g.friend_actor;
    g.when = pick(r.whens.size());
    Story s;
    char id[32];
    std::snprintf(id, sizeof id, "story-%06d", i);
    s.id = id;
    s.tags = g;
    s.sentences = render(g, r);
    out.push_back(std::move(s));
  }
  std::vector<std::size_t> order(out.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = out.size() * 8 / 10;
  const std::size_t n_dev = out.size() / 10;
  for (std::size_t k = 0; k < order.size(); ++k) {
    out[order[k]].split = k < n_train ? "train" : (k < n_train + n_dev ? "dev" : "test");
  }
  return out;
}

TokenSeq story_tokens(const Story& story, const Vocab& vocab) {
  TokenSeq out{vocab.bos()};
  for (const auto& s : story.sentences) {
    const auto ids = vocab.encode(s);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  out.push_back(vocab.eos());
  return out;
}

Instance make_abductive(const Story& story, int gold_sentences) {
  Instance in;
  in.id = story.id;
  in.task = "abductive";
  in.x = story.sentences[0];
  in.z = story.sentences[4];
  in.gold = story.sentences[1];
  if (gold_sentences == 3) in.gold += " " + story.sentences[2] + " " + story.sentences[3];
  return in;
}

Instance make_counterfactual(const Story& story, std::uint64_t seed) {
  const RuleTable& r = RuleTable::standard();
  auto alternatives = r.events_at(r.places.at(story.tags.place));
  alternatives.erase(std::remove(alternatives.begin(), alternatives.end(), story.tags.event), alternatives.end());
  std::mt19937_64 rng(seed);
  const int alt = alternatives[std::uniform_int_distribution<std::size_t>(0, alternatives.size() - 1)(rng)];
  StoryTags g = story.tags;
  g.event = alt;
  const auto changed = render(g, r);
  Instance in;
  in.id = story.id;
  in.task = "counterfactual";
  in.x = story.sentences[0] + " " + changed[1];
  in.x_ori = story.sentences[0] + " " + story.sentences[1];
  in.z = story.sentences[2] + " " + story.sentences[3] + " " + story.sentences[4];
  in.gold = changed[2] + " " + changed[3] + " " + changed[4];
  return in;
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (const auto& w : split_whitespace(text)) {
    if (!cur.empty()) cur += ' ';
    cur += w;
    if (w == ".") {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace retro::corpus
