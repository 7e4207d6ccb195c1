#include "gsae/corpus.hpp"

#include <array>
#include <cctype>
#include <random>
#include <stdexcept>
#include <string_view>

#include "gsae/binary_io.hpp"

namespace gsae {

std::vector<int> ingest_corpus(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.empty()) {
    throw std::invalid_argument("corpus is empty: " + path.string());
  }
  std::vector<int> tokens(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    tokens[i] = static_cast<unsigned char>(bytes[i]);
  }
  return tokens;
}

std::vector<std::vector<int>> chunk_sequences(std::span<const int> stream,
                                              std::size_t context_length) {
  if (context_length == 0) throw std::invalid_argument("context_length must be > 0");
  std::vector<std::vector<int>> out;
  out.reserve((stream.size() + context_length - 1) / context_length);
  for (std::size_t i = 0; i < stream.size(); i += context_length) {
    const std::size_t n = std::min(context_length, stream.size() - i);
    out.emplace_back(stream.begin() + i, stream.begin() + i + n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Verb {
  std::string_view base, past;
};

struct Topic {
  std::string_view name;
  std::vector<std::string_view> nouns;
  std::vector<Verb> verbs;
  std::vector<std::string_view> adjectives;
  std::vector<std::string_view> places;
};

const std::vector<Topic>& topics() {
  static const std::vector<Topic> kTopics = {
      {"weather",
       {"storm", "cloud", "rain", "wind", "snow", "river", "forecast", "sky",
        "thunder", "fog", "season", "flood", "breeze", "frost", "harbor"},
       {{"drift", "drifted"}, {"gather", "gathered"}, {"fall", "fell"},
        {"blow", "blew"}, {"freeze", "froze"}, {"flood", "flooded"},
        {"clear", "cleared"}, {"warn", "warned"}},
       {"cold", "grey", "heavy", "wet", "calm", "bright", "wild", "humid", "dark"},
       {"the coast", "the valley", "the northern hills", "the old port"}},
      {"cooking",
       {"soup", "bread", "onion", "garlic", "pan", "oven", "recipe", "butter",
        "salt", "pepper", "kitchen", "dough", "sauce", "knife", "spoon"},
       {{"stir", "stirred"}, {"bake", "baked"}, {"chop", "chopped"},
        {"taste", "tasted"}, {"boil", "boiled"}, {"slice", "sliced"},
        {"serve", "served"}, {"mix", "mixed"}},
       {"fresh", "warm", "sweet", "salty", "crisp", "golden", "spicy", "thick"},
       {"the kitchen", "the bakery", "the market", "the restaurant"}},
      {"space",
       {"planet", "star", "rocket", "orbit", "moon", "comet", "telescope",
        "galaxy", "engine", "crew", "signal", "station", "asteroid", "probe"},
       {{"launch", "launched"}, {"orbit", "orbited"}, {"detect", "detected"},
        {"observe", "observed"}, {"land", "landed"}, {"drift", "drifted"},
        {"measure", "measured"}, {"transmit", "transmitted"}},
       {"distant", "bright", "silent", "frozen", "massive", "red", "ancient"},
       {"the launch site", "mission control", "the observatory", "deep space"}},
      {"sports",
       {"team", "ball", "coach", "goal", "match", "season", "player", "field",
        "score", "referee", "league", "trophy", "crowd", "runner", "race"},
       {{"kick", "kicked"}, {"win", "won"}, {"lose", "lost"}, {"train", "trained"},
        {"score", "scored"}, {"pass", "passed"}, {"defend", "defended"},
        {"cheer", "cheered"}},
       {"fast", "strong", "young", "final", "tired", "proud", "loud"},
       {"the stadium", "the training ground", "the city arena", "the track"}},
      {"computers",
       {"program", "server", "file", "network", "bug", "compiler", "memory",
        "screen", "keyboard", "database", "function", "cache", "kernel",
        "packet", "thread"},
       {{"compile", "compiled"}, {"crash", "crashed"}, {"load", "loaded"},
        {"debug", "debugged"}, {"store", "stored"}, {"send", "sent"},
        {"parse", "parsed"}, {"restart", "restarted"}},
       {"slow", "fast", "broken", "remote", "binary", "parallel", "empty"},
       {"the data center", "the lab", "the office", "the terminal"}},
      {"animals",
       {"cat", "dog", "horse", "bird", "fox", "rabbit", "owl", "wolf", "deer",
        "fish", "nest", "tail", "farm", "meadow", "forest"},
       {{"chase", "chased"}, {"sleep", "slept"}, {"hunt", "hunted"},
        {"run", "ran"}, {"hide", "hid"}, {"feed", "fed"}, {"watch", "watched"},
        {"bark", "barked"}},
       {"small", "quick", "lazy", "brown", "wild", "hungry", "gentle", "shy"},
       {"the farm", "the forest", "the meadow", "the barn"}},
      {"music",
       {"song", "guitar", "piano", "drum", "band", "melody", "concert", "singer",
        "chord", "rhythm", "album", "stage", "violin", "note", "voice"},
       {{"play", "played"}, {"sing", "sang"}, {"record", "recorded"},
        {"tune", "tuned"}, {"perform", "performed"}, {"hum", "hummed"},
        {"compose", "composed"}, {"practice", "practiced"}},
       {"loud", "soft", "slow", "bright", "sad", "joyful", "quiet", "new"},
       {"the hall", "the studio", "the club", "the festival"}},
      {"trade",
       {"market", "price", "coin", "ship", "merchant", "contract", "bank",
        "loan", "cargo", "tax", "profit", "buyer", "seller", "crate", "ledger"},
       {{"buy", "bought"}, {"sell", "sold"}, {"pay", "paid"}, {"ship", "shipped"},
        {"count", "counted"}, {"lend", "lent"}, {"trade", "traded"},
        {"borrow", "borrowed"}},
       {"cheap", "rich", "costly", "foreign", "honest", "busy", "late"},
       {"the harbor", "the exchange", "the bank", "the warehouse"}},
  };
  return kTopics;
}

constexpr std::array<std::string_view, 16> kNames = {
    "Anna", "Ben",  "Clara", "David", "Elena", "Felix", "Grace", "Hugo",
    "Iris", "Jonas", "Kara", "Leo",  "Maya",  "Nora",  "Omar",  "Paul"};
constexpr std::array<std::string_view, 12> kConnectives = {
    "then", "later", "soon", "meanwhile", "after that", "once again",
    "suddenly", "finally", "still", "yesterday", "today", "at night"};
constexpr std::array<std::string_view, 8> kPrepositions = {
    "near", "behind", "under", "beside", "across", "inside", "past", "above"};
constexpr std::array<std::string_view, 10> kNumberWords = {
    "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "twelve"};

class TextGen {
 public:
  explicit TextGen(std::uint64_t seed) : rng_(seed) {}

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
  bool chance(unsigned percent) { return below(100) < percent; }

  // Zipf-like pick: earlier entries are more frequent.
  template <typename C>
  const auto& zipf(const C& items) {
    const std::size_t n = items.size();
    const std::size_t a = below(n), b = below(n);
    return items[std::min(a, b)];
  }
  template <typename C>
  const auto& any(const C& items) {
    return items[below(items.size())];
  }

  std::string sentence(const Topic& t) {
    std::string s;
    const std::string_view name = any(kNames);
    switch (below(9)) {
      case 0:
        s = cat("The ", zipf(t.adjectives), " ", zipf(t.nouns), " ",
                zipf(t.verbs).past, " ", any(kPrepositions), " the ",
                zipf(t.nouns), ".");
        break;
      case 1:
        s = cat(name, " said that the ", zipf(t.nouns), " was ",
                zipf(t.adjectives), ".");
        break;
      case 2:
        s = cat("\"Did you ", zipf(t.verbs).base, " the ", zipf(t.nouns),
                "?\" asked ", name, ".");
        break;
      case 3:
        s = cat("In ", std::to_string(1900 + below(125)), ", ",
                std::to_string(2 + below(98)), " ", zipf(t.nouns), "s were ",
                zipf(t.verbs).past, " near ", any(t.places), ".");
        break;
      case 4:
        s = cat(capitalize(any(kConnectives)), " ", name, " ", zipf(t.verbs).past,
                " the ", zipf(t.adjectives), " ", zipf(t.nouns), ".");
        break;
      case 5:
        s = cat("Why would anyone ", zipf(t.verbs).base, " a ",
                zipf(t.adjectives), " ", zipf(t.nouns), "?");
        break;
      case 6:
        s = cat("We ", zipf(t.verbs).past, " ", any(kNumberWords), " ",
                zipf(t.nouns), "s and one ", zipf(t.nouns), " at ",
                any(t.places), ".");
        break;
      case 7:
        s = cat("The ", zipf(t.nouns), " is ", zipf(t.adjectives), ", but the ",
                zipf(t.nouns), " is ", zipf(t.adjectives), ".");
        break;
      default:
        s = cat(name, " and ", any(kNames), " ", zipf(t.verbs).past, " the ",
                zipf(t.nouns), " ", std::to_string(1 + below(12)), " times.");
        break;
    }
    return s;
  }

  std::string list(const Topic& t) {
    std::string s = cat(capitalize(t.name), " notes:\n");
    const std::size_t n = 2 + below(4);
    for (std::size_t i = 0; i < n; ++i) {
      s += cat("- ", std::to_string(1 + below(20)), " ", zipf(t.adjectives), " ",
               zipf(t.nouns), "\n");
    }
    return s;
  }

  std::string paragraph() {
    const auto& all = topics();
    const Topic& t = zipf(all);
    std::string p;
    if (chance(10)) p += cat("== ", capitalize(t.name), " ==\n");
    if (chance(12)) return p + list(t) + "\n";
    const std::size_t n = 3 + below(5);
    for (std::size_t i = 0; i < n; ++i) {
      // Occasional off-topic sentence.
      const Topic& st = chance(8) ? any(all) : t;
      if (i) p += ' ';
      p += sentence(st);
    }
    return p + "\n\n";
  }

 private:
  template <typename... Parts>
  static std::string cat(const Parts&... parts) {
    std::string s;
    (s.append(std::string_view(parts)), ...);
    return s;
  }
  static std::string capitalize(std::string_view w) {
    std::string s(w);
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  }

  std::mt19937_64 rng_;
};

}  // namespace

std::string generate_synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
  TextGen gen(seed);
  std::string out;
  out.reserve(n_bytes + 1024);
  while (out.size() < n_bytes) out += gen.paragraph();
  out.resize(n_bytes);
  return out;
}

}  // namespace gsae
