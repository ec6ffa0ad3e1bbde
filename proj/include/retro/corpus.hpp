#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "retro/vocab.hpp"

namespace retro::corpus {

// One causal event and everything it determines downstream.
struct Event {
  std::string place;
  std::string verb;         // s2: "<actor> <verb> the <object> ."
  std::string object;
  std::string reaction;     // s3: "<pronoun> <adverb> <reaction> it ."
  std::string result_verb;  // s5: "<actor> <result_verb> the <result_object> ."
  std::string result_object;
};

// The generator's rule table. Every story is
//   s1 "<actor> went to the <place> ."
//   s2 "<actor> <verb> the <object> ."            event drawn from the place
//   s3 "<pronoun> <adverb> <reaction> it ."       reaction fixed by the event
//   s4 "<pronoun> <contact> <friend> <when> ."    free slots
//   s5 "<actor> <result_verb> the <result_object> ."  fixed by actor and event
struct RuleTable {
  std::vector<std::string> actors;
  std::vector<bool> actor_female;
  std::vector<std::string> places;
  std::vector<Event> events;
  std::vector<std::string> adverbs;
  std::vector<std::string> contacts;
  std::vector<std::string> whens;

  static const RuleTable& standard();

  std::vector<int> events_at(const std::string& place) const;
  const std::string& pronoun(int actor) const;
  int actor_index(const std::string& name) const;  // -1 when absent
  int place_index(const std::string& name) const;
  int event_index(const std::string& verb) const;
  // Every word the generator can emit, in a fixed order.
  std::vector<std::string> words() const;
};

Vocab build_vocab(const RuleTable& rules = RuleTable::standard());

struct StoryTags {
  int actor = 0;
  int place = 0;
  int event = 0;
  int adverb = 0;
  int contact = 0;
  int friend_actor = 0;
  int when = 0;
};

struct Story {
  std::string id;
  std::string split;  // train | dev | test
  std::array<std::string, 5> sentences;
  StoryTags tags;
};

// Renders the five sentences implied by the tags.
std::array<std::string, 5> render(const StoryTags& tags, const RuleTable& rules = RuleTable::standard());

// Recovers the tags of a story that satisfies the rule table, or nullopt.
std::optional<StoryTags> parse_story(const std::array<std::string, 5>& sentences,
                                     const RuleTable& rules = RuleTable::standard());
bool check_story(const std::array<std::string, 5>& sentences, const RuleTable& rules = RuleTable::standard());

// Deterministic in (n_stories, seed); splits 80/10/10 by shuffled story index.
std::vector<Story> generate_corpus(int n_stories, std::uint64_t seed);

// The LM training sequence for a story: <bos> s1 .. s5 <eos>.
TokenSeq story_tokens(const Story& story, const Vocab& vocab);

struct Instance {
  std::string id;
  std::string task;  // abductive | counterfactual
  std::string x;
  std::string z;
  std::optional<std::string> x_ori;
  std::string gold;

  friend bool operator==(const Instance&, const Instance&) = default;
};

// X = s1, Z = s5. gold is s2, or s2..s4 when gold_sentences == 3.
Instance make_abductive(const Story& story, int gold_sentences = 1);

// Replaces the event of s2 by another event at the same place (drawn from
// seed). X = s1 s2', x_ori = s1 s2, Z = s3 s4 s5, gold = the ending re-rendered
// for the new event with every free slot kept.
Instance make_counterfactual(const Story& story, std::uint64_t seed);

std::vector<std::string> split_sentences(const std::string& text);

}  // namespace retro::corpus
