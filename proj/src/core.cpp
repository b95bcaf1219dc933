// Copyright 2026 The agentserve Authors.
// SPDX-License-Identifier: Apache-2.0

#include "agentserve/core.hpp"

#include <charconv>

namespace agentserve {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidField: return "InvalidField";
    case ErrorCode::kTimeInPast: return "TimeInPast";
    case ErrorCode::kUnknownLink: return "UnknownLink";
    case ErrorCode::kInvalidGranularity: return "InvalidGranularity";
    case ErrorCode::kUnknownParameter: return "UnknownParameter";
    case ErrorCode::kValueOutOfRange: return "ValueOutOfRange";
    case ErrorCode::kNoResidentCache: return "NoResidentCache";
    case ErrorCode::kUnknownMetric: return "UnknownMetric";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kUnknownCustomAggregation: return "UnknownCustomAggregation";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kDuplicateName: return "DuplicateName";
    case ErrorCode::kDuplicateRegistration: return "DuplicateRegistration";
    case ErrorCode::kUnknownTarget: return "UnknownTarget";
    case ErrorCode::kUnknownKnob: return "UnknownKnob";
    case ErrorCode::kNoInstanceAvailable: return "NoInstanceAvailable";
    case ErrorCode::kInvalidIntent: return "InvalidIntent";
    case ErrorCode::kConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::optional<InvalidField> validate_request(const Request& r) {
  if (r.arrival.ms() < 0.0) return InvalidField{"arrival", "must be non-negative"};
  if (!r.priority.valid()) return InvalidField{"priority", "level must be in [0,7]"};
  if (r.prompt_tokens < 1) return InvalidField{"prompt_tokens", "must be >= 1"};
  if (r.output_tokens < 1) return InvalidField{"output_tokens", "must be >= 1"};
  if (r.slo_deadline && *r.slo_deadline <= r.arrival) {
    return InvalidField{"slo_deadline", "must be later than arrival"};
  }
  return std::nullopt;
}

Granularity Granularity::token_stream(std::int64_t chunk_tokens) {
  if (chunk_tokens < 1) {
    throw Error(ErrorCode::kInvalidGranularity, "chunk_tokens must be >= 1");
  }
  return Granularity(Kind::kTokenStream, chunk_tokens);
}

Granularity Granularity::parse(std::string_view text) {
  if (text == "batch_all" || text == "batch") return batch_all();
  if (text == "per_function" || text == "function") return per_function();
  if (text == "token_stream" || text == "stream") return token_stream(kDefaultChunkTokens);
  constexpr std::string_view prefix = "token_stream(";
  if (text.starts_with(prefix) && text.ends_with(")")) {
    auto digits = text.substr(prefix.size(), text.size() - prefix.size() - 1);
    std::int64_t chunk = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), chunk);
    if (ec != std::errc() || ptr != digits.data() + digits.size()) {
      throw Error(ErrorCode::kInvalidGranularity, "bad chunk size in '" + std::string(text) + "'");
    }
    return token_stream(chunk);
  }
  throw Error(ErrorCode::kInvalidGranularity, "unknown granularity '" + std::string(text) + "'");
}

std::string Granularity::to_string() const {
  if (kind_ == Kind::kTokenStream) return "token_stream(" + std::to_string(chunk_) + ")";
  return std::string(mode_name(kind_));
}

std::string_view mode_name(Granularity::Kind kind) {
  switch (kind) {
    case Granularity::Kind::kTokenStream: return "token_stream";
    case Granularity::Kind::kPerFunction: return "per_function";
    case Granularity::Kind::kBatchAll: return "batch_all";
  }
  return "?";
}

}  // namespace agentserve
