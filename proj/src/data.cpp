#include "lms/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace lms {

namespace {

constexpr const char* kCorpusMagic = "lms-corpus";
constexpr int kCorpusVersion = 1;

std::string utterance_id(std::size_t speaker, std::size_t utt) {
  std::ostringstream os;
  os << "spk" << std::setw(3) << std::setfill('0') << speaker << "-utt" << std::setw(3)
     << std::setfill('0') << utt;
  return os.str();
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("corpus file " + path.string() + ": " + what);
}

// Draws k distinct indices from [0, n) by a partial Fisher-Yates shuffle.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

void CorpusSpec::validate() const {
  if (n_speakers < 2) throw std::invalid_argument("corpus.n_speakers must be >= 2");
  if (feature_dim < 2) throw std::invalid_argument("corpus.feature_dim must be >= 2");
  if (frames_min < 1 || frames_min > frames_max)
    throw std::invalid_argument("corpus.frames_min must be in [1, frames_max]");
  if (!(within_speaker_noise >= 0.0) || !(channel_noise >= 0.0))
    throw std::invalid_argument("corpus noise levels must be >= 0");
  if (!(speaker_gain > 0.0)) throw std::invalid_argument("corpus.speaker_gain must be positive");
}

std::size_t Corpus::num_utterances() const {
  std::size_t n = 0;
  for (const Speaker& s : speakers) n += s.utterances.size();
  return n;
}

const Utterance& Corpus::find(const std::string& id) const {
  for (const Speaker& s : speakers)
    for (const Utterance& u : s.utterances)
      if (u.id == id) return u;
  throw std::out_of_range("utterance '" + id + "' not found");
}

int Corpus::speaker_of(const std::string& id) const {
  for (std::size_t i = 0; i < speakers.size(); ++i)
    for (const Utterance& u : speakers[i].utterances)
      if (u.id == id) return static_cast<int>(i);
  return -1;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  RngStream rng(spec.seed, streams::kData);
  const std::size_t dim = spec.feature_dim;

  std::vector<Vector> directions(spec.n_speakers);
  for (Vector& dir : directions) {
    do {
      dir = rng_draw_gaussian(rng, dim);
    } while (norm2(dir) < 1e-8);
    const double n = norm2(dir);
    for (double& v : dir) v /= n;
  }

  Corpus corpus;
  corpus.feature_dim = dim;
  corpus.speakers.resize(spec.n_speakers);
  const std::size_t span = spec.frames_max - spec.frames_min + 1;
  for (std::size_t s = 0; s < spec.n_speakers; ++s) {
    Speaker& speaker = corpus.speakers[s];
    std::ostringstream name;
    name << "spk" << std::setw(3) << std::setfill('0') << s;
    speaker.name = name.str();
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      const std::size_t frames = spec.frames_min + static_cast<std::size_t>(rng.uniform_int(span));
      Vector channel = rng_draw_gaussian(rng, dim);
      Matrix m(frames, dim);
      for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t d = 0; d < dim; ++d) {
          m(t, d) = spec.speaker_gain * directions[s][d] + spec.channel_noise * channel[d] +
                    spec.within_speaker_noise * rng.gaussian();
        }
      }
      speaker.utterances.push_back({utterance_id(s, u), std::move(m)});
    }
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path,
                  const std::string& config_digest) {
  std::ostringstream header;
  header << kCorpusMagic << ' ' << kCorpusVersion << '\n';
  header << "digest " << (config_digest.empty() ? "-" : config_digest) << '\n';
  header << "dim " << corpus.feature_dim << '\n';
  header << "speakers " << corpus.num_speakers() << '\n';
  header << "utterances " << corpus.num_utterances() << '\n';
  std::string payload;
  for (std::size_t s = 0; s < corpus.speakers.size(); ++s) {
    const Speaker& speaker = corpus.speakers[s];
    header << "speaker " << speaker.name << ' ' << speaker.utterances.size() << '\n';
    for (const Utterance& u : speaker.utterances) {
      if (u.frames.cols() != corpus.feature_dim && u.frames.rows() > 0) {
        throw std::invalid_argument("utterance " + u.id + " has the wrong feature dimension");
      }
      header << "utt " << u.id << ' ' << u.frames.rows() << '\n';
      for (double v : u.frames.data()) put_f64(payload, v);
    }
  }
  header << "end\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string text = header.str();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());

  auto expect_line = [&](const std::string& key) {
    std::string line;
    if (!std::getline(in, line)) corrupt(path, "truncated header, expected '" + key + "'");
    std::istringstream is(line);
    std::string got;
    is >> got;
    if (got != key) corrupt(path, "expected '" + key + "', found '" + got + "'");
    std::string rest;
    std::getline(is, rest);
    if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
    return rest;
  };
  auto as_count = [&](const std::string& text, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(text, &pos);
    } catch (const std::exception&) {
      corrupt(path, "bad " + what + " '" + text + "'");
    }
    if (pos != text.size()) corrupt(path, "bad " + what + " '" + text + "'");
    return static_cast<std::size_t>(v);
  };

  if (expect_line(kCorpusMagic) != std::to_string(kCorpusVersion)) {
    corrupt(path, "unsupported format version");
  }
  expect_line("digest");
  Corpus corpus;
  corpus.feature_dim = as_count(expect_line("dim"), "dim");
  const std::size_t n_speakers = as_count(expect_line("speakers"), "speaker count");
  const std::size_t n_utts = as_count(expect_line("utterances"), "utterance count");

  struct Pending {
    std::size_t speaker;
    std::string id;
    std::size_t frames;
  };
  std::vector<Pending> pending;
  for (std::size_t s = 0; s < n_speakers; ++s) {
    std::istringstream is(expect_line("speaker"));
    std::string name;
    std::size_t count = 0;
    if (!(is >> name >> count)) corrupt(path, "malformed speaker line");
    corpus.speakers.push_back({name, {}});
    for (std::size_t u = 0; u < count; ++u) {
      std::istringstream us(expect_line("utt"));
      std::string id;
      std::size_t frames = 0;
      if (!(us >> id >> frames)) corrupt(path, "malformed utt line");
      pending.push_back({s, id, frames});
    }
  }
  if (pending.size() != n_utts) corrupt(path, "utterance count does not match header");
  expect_line("end");

  std::size_t total = 0;
  for (const Pending& p : pending) total += p.frames * corpus.feature_dim;
  std::vector<unsigned char> bytes(total * 8);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) corrupt(path, "truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) corrupt(path, "trailing bytes after payload");

  std::size_t offset = 0;
  for (const Pending& p : pending) {
    Matrix m(p.frames, corpus.feature_dim);
    for (double& v : m.storage()) {
      v = get_f64(bytes.data() + offset);
      offset += 8;
    }
    corpus.speakers[p.speaker].utterances.push_back({p.id, std::move(m)});
  }
  return corpus;
}

CorpusSplit split_corpus(const Corpus& corpus, const SplitSpec& spec) {
  if (spec.n_train_speakers < 2 || spec.n_test_speakers < 2) {
    throw std::invalid_argument("split needs at least two train and two test speakers");
  }
  if (spec.n_train_speakers + spec.n_test_speakers > corpus.num_speakers()) {
    throw std::invalid_argument("split asks for " +
                                std::to_string(spec.n_train_speakers + spec.n_test_speakers) +
                                " speakers but the corpus has " +
                                std::to_string(corpus.num_speakers()));
  }
  CorpusSplit split;
  split.train.feature_dim = split.validation.feature_dim = split.test.feature_dim =
      corpus.feature_dim;
  for (std::size_t s = 0; s < spec.n_train_speakers; ++s) {
    const Speaker& src = corpus.speakers[s];
    if (src.utterances.size() <= spec.val_utts_per_speaker) {
      throw std::invalid_argument("speaker " + src.name + " has too few utterances for validation");
    }
    const auto cut = src.utterances.end() - static_cast<std::ptrdiff_t>(spec.val_utts_per_speaker);
    split.train.speakers.push_back({src.name, {src.utterances.begin(), cut}});
    split.validation.speakers.push_back({src.name, {cut, src.utterances.end()}});
  }
  for (std::size_t s = spec.n_train_speakers; s < spec.n_train_speakers + spec.n_test_speakers; ++s) {
    split.test.speakers.push_back(corpus.speakers[s]);
  }
  return split;
}

TrialSet generate_trials(const Corpus& split, RngStream& rng, std::size_t n_target,
                         std::size_t n_nontarget) {
  struct Ref {
    std::size_t speaker;
    const std::string* id;
  };
  std::vector<Ref> refs;
  for (std::size_t s = 0; s < split.speakers.size(); ++s)
    for (const Utterance& u : split.speakers[s].utterances) refs.push_back({s, &u.id});

  std::vector<std::pair<std::size_t, std::size_t>> same, cross;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (std::size_t j = i + 1; j < refs.size(); ++j) {
      (refs[i].speaker == refs[j].speaker ? same : cross).emplace_back(i, j);
    }
  }
  if (n_target > same.size()) {
    throw std::invalid_argument("requested " + std::to_string(n_target) +
                                " target trials but only " + std::to_string(same.size()) +
                                " same-speaker pairs exist");
  }
  if (n_nontarget > cross.size()) {
    throw std::invalid_argument("requested " + std::to_string(n_nontarget) +
                                " nontarget trials but only " + std::to_string(cross.size()) +
                                " cross-speaker pairs exist");
  }
  TrialSet trials;
  trials.reserve(n_target + n_nontarget);
  for (std::size_t k : sample_without_replacement(same.size(), n_target, rng)) {
    trials.push_back({*refs[same[k].first].id, *refs[same[k].second].id, true});
  }
  for (std::size_t k : sample_without_replacement(cross.size(), n_nontarget, rng)) {
    trials.push_back({*refs[cross[k].first].id, *refs[cross[k].second].id, false});
  }
  return trials;
}

void write_trials(const TrialSet& trials, const std::filesystem::path& path, const std::string& config_digest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (!config_digest.empty()) out << "# config_digest " << config_digest << '\n';
  for (const Trial& t : trials) {
    out << t.enroll << ' ' << t.test << ' ' << (t.target ? "target" : "nontarget") << '\n';
  }
}

TrialSet read_trials(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trial file " + path.string());
  TrialSet trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream is(line);
    std::string enroll, test, flag, extra;
    if (!(is >> enroll) || enroll.front() == '#') continue;
    if (!(is >> test >> flag) || (is >> extra) || (flag != "target" && flag != "nontarget")) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected '<enroll> <test> target|nontarget'");
    }
    trials.push_back({enroll, test, flag == "target"});
  }
  return trials;
}

}  // namespace lms
