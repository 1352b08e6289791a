#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "atbias/token_space.hpp"

namespace httplib {
class Client;
}

namespace atbias {

struct BackendCapability {
  std::size_t max_context = 0;  // characters; 0 means unbounded
  std::size_t max_top_n = 0;    // 0 means unbounded
  std::size_t vocab_size = 0;   // 0 when unknown
  bool normalized = true;       // probabilities are a full-vocabulary softmax
};

// A language model seen through next-token probabilities. step() returns
// the top_n most probable tokens for `context`, sorted, with probabilities
// over the full vocabulary. Implementations must be safe to call from
// several threads.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  [[nodiscard]] virtual BackendCapability capability() const = 0;
  [[nodiscard]] virtual TokenDistribution step(std::string_view context,
                                               std::size_t top_n) const = 0;
  [[nodiscard]] virtual const PieceNormalizer& normalizer() const {
    static const PieceNormalizer defaults;
    return defaults;
  }
};

// Scripted language model for tests and benchmarks. Each script entry maps a
// context suffix to an explicit distribution; the longest suffix matching
// the context wins. Probabilities of vocabulary tokens not listed in a row
// set are zero.
class MockLM final : public ModelBackend {
 public:
  struct Row {
    std::string piece;
    double prob = 0.0;
  };
  enum class Unscripted { error, fallback };

  MockLM();
  explicit MockLM(PieceNormalizer normalizer, std::string end_piece = "</s>");

  // Loads the JSON script format described in docs/formats.md.
  static MockLM from_json(const nlohmann::json& j);
  static MockLM load(const std::filesystem::path& path);

  // Adds `piece` to the vocabulary if needed and returns its id.
  TokenId intern(std::string_view piece);

  // Rows must be valid probabilities summing to 1.
  void script(std::string suffix, const std::vector<Row>& rows);

  // Expands `text` word by word: after suffix + the first i words the next
  // word is emitted with `confidence`, the rest going to the end piece;
  // after the last word the end piece has probability 1.
  void script_completion(std::string_view suffix, std::string_view text,
                         double confidence = 0.9);

  void set_fallback(const std::vector<Row>& rows);
  void set_unscripted(Unscripted u) { unscripted_ = u; }

  // Pads the vocabulary with zero-probability filler tokens up to `size`.
  void pad_vocabulary(std::size_t size);

  [[nodiscard]] BackendCapability capability() const override;
  [[nodiscard]] TokenDistribution step(std::string_view context,
                                       std::size_t top_n) const override;
  [[nodiscard]] const PieceNormalizer& normalizer() const override {
    return normalizer_;
  }

  [[nodiscard]] TokenId end_token() const { return TokenId(0); }
  [[nodiscard]] const std::string& end_piece() const { return vocab_.front().raw; }
  [[nodiscard]] std::size_t vocab_size() const { return vocab_.size(); }
  [[nodiscard]] const TokenPiece& piece(TokenId id) const {
    return vocab_.at(id.value);
  }
  [[nodiscard]] std::size_t script_size() const { return scripts_.size(); }

 private:
  struct Scripted {
    std::vector<TokenId> ids;  // sorted by (prob desc, id asc)
    std::vector<double> probs;
  };

  Scripted compile(const std::vector<Row>& rows);
  const Scripted* match(std::string_view context) const;

  PieceNormalizer normalizer_;
  std::vector<TokenPiece> vocab_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::vector<std::pair<std::string, Scripted>> scripts_;
  std::optional<Scripted> fallback_;
  Unscripted unscripted_ = Unscripted::error;
};

// Wire protocol for remote inference servers (docs/wire_protocol.md).
struct StepRequest {
  std::variant<std::string, std::vector<TokenId>> context;
  std::size_t top_n = 0;
};

[[nodiscard]] nlohmann::json encode_step_request(const StepRequest& req);

struct StepResponseOptions {
  bool allow_renormalize = false;
};

// Validates a response body into a distribution. Unsorted rows are re-sorted
// with a warning; everything else that breaks the contract throws
// ProtocolError. Non-normalized responses throw ConfigError unless
// renormalization is allowed.
[[nodiscard]] TokenDistribution parse_step_response(
    const nlohmann::json& body, std::size_t top_n,
    const PieceNormalizer& normalizer, const StepResponseOptions& opts = {});

struct RemoteOptions {
  std::string endpoint;  // e.g. http://127.0.0.1:8080/v1/next_token
  double timeout_seconds = 30.0;
  bool allow_renormalize = false;
  std::vector<std::string> markers = PieceNormalizer::default_markers();
};

// HTTP client for the wire protocol. Requests from several threads are
// serialized over one connection.
class RemoteBackend final : public ModelBackend {
 public:
  explicit RemoteBackend(RemoteOptions opts);
  ~RemoteBackend() override;

  [[nodiscard]] BackendCapability capability() const override;
  [[nodiscard]] TokenDistribution step(std::string_view context,
                                       std::size_t top_n) const override;
  [[nodiscard]] const PieceNormalizer& normalizer() const override {
    return normalizer_;
  }

  // Issues one request with an explicit context.
  [[nodiscard]] TokenDistribution remote_step(const StepRequest& req) const;

 private:
  RemoteOptions opts_;
  PieceNormalizer normalizer_;
  std::string path_;
  std::unique_ptr<httplib::Client> client_;
  mutable std::mutex mutex_;
  mutable std::size_t last_vocab_size_ = 0;
};

// Free-function form of RemoteBackend::remote_step.
[[nodiscard]] TokenDistribution remote_step(const RemoteBackend& client,
                                            std::string_view context,
                                            std::size_t top_n);

}  // namespace atbias
