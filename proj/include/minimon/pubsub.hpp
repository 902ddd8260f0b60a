#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "minimon/core.hpp"
#include "minimon/tsdb.hpp"

namespace minimon::pubsub {

/// Subjects are dot-separated non-empty tokens without whitespace
/// (`cms.wmarchive.exitCode`). Patterns may additionally use `*` for
/// exactly one token and `>` for one-or-more trailing tokens (final
/// position only).
bool valid_subject(std::string_view subject, bool allow_wildcards);

/// True iff the pattern matches the (literal) subject.
bool match_subject(std::string_view pattern, std::string_view subject);

/// True iff every subject matched by `requested` is matched by `allowed`;
/// used for token permission checks on SUB patterns.
bool pattern_covers(std::string_view allowed, std::string_view requested);

struct AuthToken {
  std::string token;
  std::vector<std::string> allowed_publish;
  std::vector<std::string> allowed_subscribe;

  bool may_publish(std::string_view subject) const;
  bool may_subscribe(std::string_view pattern) const;
};

struct OpResult {
  bool ok = true;
  std::string error;

  static OpResult fail(std::string message) { return {false, std::move(message)}; }
};

using ConnId = std::uint64_t;

/// Transport-independent proxy core: token-authenticated connections,
/// pattern subscriptions, synchronous fan-out to per-connection sinks.
/// Nothing is ever stored; a message published before a subscription
/// existed is gone.
class Broker {
 public:
  using Sink =
      std::function<void(const std::string& sid, const std::string& subject,
                         const std::string& payload)>;

  explicit Broker(std::map<std::string, AuthToken> tokens);

  std::optional<ConnId> connect(const std::string& token);
  void set_sink(ConnId conn, Sink sink);
  void disconnect(ConnId conn);

  OpResult subscribe(ConnId conn, const std::string& pattern, const std::string& sid);
  OpResult unsubscribe(ConnId conn, const std::string& sid);
  /// Delivers to every matching live subscription exactly once each and
  /// returns the number of deliveries.
  OpResult publish(ConnId conn, const std::string& subject, const std::string& payload,
                   std::size_t* delivered = nullptr);

  std::size_t subscription_count() const;

 private:
  struct Subscription {
    ConnId conn;
    std::string pattern;
    std::string sid;
  };
  struct Connection {
    AuthToken token;
    std::shared_ptr<Sink> sink;
  };

  mutable std::mutex mutex_;
  std::map<std::string, AuthToken> tokens_;
  std::map<ConnId, Connection> connections_;
  std::vector<Subscription> subscriptions_;
  ConnId next_conn_ = 1;
};

struct ServerOptions {
  std::string bind_host = "127.0.0.1";
  int port = 0;  // 0: pick an ephemeral port
  std::map<std::string, AuthToken> tokens;
  std::size_t pending_limit_bytes = 8 * 1024 * 1024;
};

/// Line-oriented TCP front end:
///   client -> server: CONNECT {"token":"..."}\r\n | SUB <pattern> <sid>\r\n
///     | UNSUB <sid>\r\n | PUB <subject> <nbytes>\r\n<payload>\r\n | PING\r\n
///   server -> client: +OK\r\n | -ERR <reason>\r\n
///     | MSG <subject> <sid> <nbytes>\r\n<payload>\r\n | PONG\r\n
///
/// Delivery to each connection runs on its own writer; a subscription
/// whose pending bytes exceed the limit is evicted with an -ERR notice
/// while other subscribers are unaffected.
class Server {
 public:
  explicit Server(ServerOptions options);
  ~Server();

  bool start();
  void stop();
  int port() const { return port_; }
  std::size_t subscription_count() const { return broker_.subscription_count(); }

 private:
  struct Conn;

  void accept_loop();
  void reader_loop(std::shared_ptr<Conn> conn);
  void writer_loop(std::shared_ptr<Conn> conn);
  void handle_line(Conn& conn, const std::string& line);
  void enqueue(const std::shared_ptr<Conn>& conn, const std::string& sid, std::string frame);
  void enqueue_control(Conn& conn, std::string frame);

  ServerOptions options_;
  Broker broker_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::thread accept_thread_;
  std::atomic<bool> stopping_{false};

  std::mutex conns_mutex_;
  std::vector<std::shared_ptr<Conn>> conns_;
};

struct Message {
  std::string subject;
  std::string sid;
  std::string payload;
};

/// Small synchronous client for the proxy protocol; used by the CLI, the
/// bridge and the tests.
class Client {
 public:
  Client() = default;
  ~Client();

  bool connect(const std::string& host, int port, const std::string& token,
               std::string* error = nullptr);
  void close();
  bool connected() const { return fd_ >= 0; }

  OpResult subscribe(const std::string& pattern, const std::string& sid);
  OpResult unsubscribe(const std::string& sid);
  OpResult publish(const std::string& subject, const std::string& payload);
  OpResult ping();

  /// Next MSG, waiting up to timeout. nullopt on timeout or close.
  std::optional<Message> next_message(std::int64_t timeout_ms);

 private:
  OpResult await_ack();
  void reader_loop();

  int fd_ = -1;
  std::thread reader_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Message> messages_;
  std::deque<OpResult> acks_;
  bool closed_ = false;
};

struct BridgeOptions {
  std::string host = "127.0.0.1";
  int port = 0;
  std::string token;
  std::vector<std::string> patterns;
};

struct BridgeStats {
  std::uint64_t received = 0;
  std::uint64_t written = 0;
  std::uint64_t dropped = 0;
};

/// Subscriber that feeds metric messages into the tsdb. Payloads are JSON
/// objects {"name","tags","value","ts"?}; undecodable payloads and failed
/// writes are counted and dropped (real-time data is never queued).
class Bridge {
 public:
  Bridge(tsdb::Store& store, BridgeOptions options);
  ~Bridge();

  bool start(std::string* error = nullptr);
  void stop();
  BridgeStats stats() const;

  static std::optional<tsdb::MetricPoint> decode(const std::string& payload, Timestamp arrival);

 private:
  void run();

  tsdb::Store& store_;
  BridgeOptions options_;
  Client client_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  mutable std::mutex stats_mutex_;
  BridgeStats stats_;
};

}  // namespace minimon::pubsub
