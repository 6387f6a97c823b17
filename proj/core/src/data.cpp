#include "nestnet/data.hpp"

#include <json.hpp>

#include "nestnet/error.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/serialize.hpp"

namespace nestnet {

using nlohmann::json;

std::vector<std::size_t> ToyCorpus::split_indices(const std::string& split) const {
  std::size_t begin = 0, count = 0;
  if (split == "train") {
    begin = train_begin();
    count = meta.n_train;
  } else if (split == "dev") {
    begin = dev_begin();
    count = meta.n_dev;
  } else if (split == "test") {
    begin = test_begin();
    count = meta.n_test;
  } else {
    fail(ErrorKind::config, "unknown split '" + split + "'");
  }
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = begin + i;
  return out;
}

ToyCorpus generate_corpus(const CorpusMeta& meta) {
  if (meta.vocab < 2) fail(ErrorKind::config, "corpus vocab must be >= 2");
  if (meta.len_min < 1 || meta.len_min > meta.len_max) {
    fail(ErrorKind::config, "empty utterance length range");
  }
  if (meta.d_in < 1 || meta.frames_per_token < 1) {
    fail(ErrorKind::config, "corpus feature geometry is degenerate");
  }
  if (meta.noise_sigma < 0.0) {
    fail(ErrorKind::config, "negative noise sigma");
  }
  ToyCorpus corpus;
  corpus.meta = meta;
  Rng rng(splitmix64(meta.seed));
  // Templates are drawn once per vocabulary entry.
  corpus.templates.reserve(meta.vocab);
  for (std::size_t v = 0; v < meta.vocab; ++v) {
    Tensor t = Tensor::zeros({meta.frames_per_token, meta.d_in});
    for (double& x : t.values()) x = rng.gaussian();
    corpus.templates.push_back(std::move(t));
  }
  const std::size_t total = meta.n_train + meta.n_dev + meta.n_test;
  corpus.utts.reserve(total);
  for (std::size_t u = 0; u < total; ++u) {
    const std::size_t len =
        meta.len_min + rng.index(meta.len_max - meta.len_min + 1);
    Utterance utt;
    utt.tokens.resize(len);
    for (std::size_t i = 0; i < len; ++i) {
      utt.tokens[i] = static_cast<std::int32_t>(1 + rng.index(meta.vocab));
    }
    utt.frames = Tensor::zeros({len * meta.frames_per_token, meta.d_in});
    for (std::size_t i = 0; i < len; ++i) {
      const Tensor& tmpl = corpus.templates[utt.tokens[i] - 1];
      for (std::size_t f = 0; f < meta.frames_per_token; ++f) {
        for (std::size_t d = 0; d < meta.d_in; ++d) {
          double v = tmpl.at(f, d);
          if (meta.noise_sigma > 0.0) v += meta.noise_sigma * rng.gaussian();
          utt.frames.at(i * meta.frames_per_token + f, d) = v;
        }
      }
    }
    corpus.utts.push_back(std::move(utt));
  }
  return corpus;
}

Tensor Batch::utterance(std::size_t i) const {
  const std::size_t t_max = feats.shape()[1];
  const std::size_t d = feats.shape()[2];
  const std::size_t len = lengths[i];
  Tensor out = Tensor::zeros({len, d});
  const double* src = feats.data() + i * t_max * d;
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t c = 0; c < d; ++c) out.at(t, c) = src[t * d + c];
  }
  return out;
}

Batch make_batch(const ToyCorpus& corpus, const std::vector<std::size_t>& indices) {
  if (indices.empty()) fail(ErrorKind::config, "empty batch");
  std::size_t t_max = 0;
  for (std::size_t i : indices) {
    if (i >= corpus.utts.size()) {
      fail(ErrorKind::config, "utterance index out of range");
    }
    t_max = std::max(t_max, corpus.utts[i].frames.rows());
  }
  Batch b;
  b.feats = Tensor::zeros({indices.size(), t_max, corpus.meta.d_in});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Utterance& utt = corpus.utts[indices[k]];
    b.lengths.push_back(utt.frames.rows());
    b.targets.push_back(utt.tokens);
    double* dst = b.feats.data() + k * t_max * corpus.meta.d_in;
    for (std::size_t i = 0; i < utt.frames.numel(); ++i) dst[i] = utt.frames[i];
  }
  return b;
}

void save_corpus(const std::string& path, const ToyCorpus& corpus) {
  const CorpusMeta& m = corpus.meta;
  json header{{"kind", "corpus"},
              {"seed", m.seed},
              {"vocab", m.vocab},
              {"d_in", m.d_in},
              {"frames_per_token", m.frames_per_token},
              {"noise_sigma", m.noise_sigma},
              {"len_min", m.len_min},
              {"len_max", m.len_max},
              {"n_train", m.n_train},
              {"n_dev", m.n_dev},
              {"n_test", m.n_test}};
  ByteSink payload;
  for (const Tensor& t : corpus.templates) payload.tensor(t);
  for (const Utterance& u : corpus.utts) {
    payload.u32(static_cast<std::uint32_t>(u.tokens.size()));
    for (std::int32_t tok : u.tokens) payload.u32(static_cast<std::uint32_t>(tok));
    payload.tensor(u.frames);
  }
  write_container(path, kCorpusMagic, kCorpusVersion, header.dump(),
                  payload.bytes());
}

ToyCorpus load_corpus(const std::string& path) {
  const Container c = read_container(path, kCorpusMagic, kCorpusVersion);
  json header = json::parse(c.header, nullptr, false);
  if (header.is_discarded() || header.value("kind", "") != "corpus") {
    fail(ErrorKind::format, path + ": not a corpus file");
  }
  ToyCorpus corpus;
  CorpusMeta& m = corpus.meta;
  m.seed = header.at("seed").get<std::uint64_t>();
  m.vocab = header.at("vocab").get<std::size_t>();
  m.d_in = header.at("d_in").get<std::size_t>();
  m.frames_per_token = header.at("frames_per_token").get<std::size_t>();
  m.noise_sigma = header.at("noise_sigma").get<double>();
  m.len_min = header.at("len_min").get<std::size_t>();
  m.len_max = header.at("len_max").get<std::size_t>();
  m.n_train = header.at("n_train").get<std::size_t>();
  m.n_dev = header.at("n_dev").get<std::size_t>();
  m.n_test = header.at("n_test").get<std::size_t>();
  ByteReader rd(c.payload);
  for (std::size_t v = 0; v < m.vocab; ++v) {
    corpus.templates.push_back(rd.tensor({m.frames_per_token, m.d_in}));
  }
  const std::size_t total = m.n_train + m.n_dev + m.n_test;
  for (std::size_t u = 0; u < total; ++u) {
    Utterance utt;
    const std::uint32_t len = rd.u32();
    utt.tokens.resize(len);
    for (std::uint32_t i = 0; i < len; ++i) {
      utt.tokens[i] = static_cast<std::int32_t>(rd.u32());
    }
    utt.frames = rd.tensor({len * m.frames_per_token, m.d_in});
    corpus.utts.push_back(std::move(utt));
  }
  return corpus;
}

std::uint32_t corpus_checksum(const ToyCorpus& corpus) {
  ByteSink sink;
  sink.u64(corpus.meta.seed);
  sink.u64(corpus.n_total());
  for (const Utterance& u : corpus.utts) {
    sink.u32(static_cast<std::uint32_t>(u.tokens.size()));
    for (std::int32_t tok : u.tokens) sink.u32(static_cast<std::uint32_t>(tok));
    sink.tensor(u.frames);
  }
  return crc32_bytes(sink.bytes().data(), sink.size());
}

}  // namespace nestnet
