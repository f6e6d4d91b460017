#include <chrono>

// lmkb.hpp (Eigen) must precede httplib.h: the resolver headers httplib pulls
// in define a `_res` macro that corrupts Eigen parameter names
#include "lmkb.hpp"

#include "httplib.h"
#include "json.hpp"

namespace semkb::lmkb {

RemoteBackend::RemoteBackend(std::string base_url, double timeout_s)
    : base_url_(std::move(base_url)), timeout_s_(timeout_s) {
  if (base_url_.empty()) fail(errc::config, "remote backend: empty base URL");
}

std::string RemoteBackend::generate_text(const std::string& prompt, double temperature,
                                         int max_tokens, std::uint64_t seed) {
  httplib::Client client(base_url_);
  const auto timeout = std::chrono::duration<double>(timeout_s_);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::milliseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::milliseconds>(timeout));

  nlohmann::json body;
  body["prompt"] = prompt;
  body["temperature"] = temperature;
  body["max_tokens"] = max_tokens;
  body["seed"] = seed;

  auto res = client.Post("/generate", body.dump(), "application/json");
  if (!res)
    fail(errc::backend, "remote backend unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200)
    fail(errc::backend, "remote backend returned status " + std::to_string(res->status));

  nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.contains("text") || !reply["text"].is_string())
    fail(errc::backend, "remote backend reply missing \"text\" field");
  return reply["text"].get<std::string>();
}

}  // namespace semkb::lmkb
