#include "minimon/pubsub.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cctype>
#include <cstring>

namespace minimon::pubsub {

namespace {

std::vector<std::string_view> split_tokens(std::string_view subject) {
  std::vector<std::string_view> tokens;
  std::size_t start = 0;
  while (start <= subject.size()) {
    std::size_t dot = subject.find('.', start);
    if (dot == std::string_view::npos) {
      tokens.push_back(subject.substr(start));
      break;
    }
    tokens.push_back(subject.substr(start, dot - start));
    start = dot + 1;
  }
  return tokens;
}

}  // namespace

bool valid_subject(std::string_view subject, bool allow_wildcards) {
  if (subject.empty()) return false;
  auto tokens = split_tokens(subject);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::string_view token = tokens[i];
    if (token.empty()) return false;
    for (char c : token)
      if (std::isspace(static_cast<unsigned char>(c))) return false;
    if (token == "*") {
      if (!allow_wildcards) return false;
      continue;
    }
    if (token == ">") {
      if (!allow_wildcards || i + 1 != tokens.size()) return false;
      continue;
    }
    if (token.find('*') != std::string_view::npos || token.find('>') != std::string_view::npos)
      return false;
  }
  return true;
}

bool match_subject(std::string_view pattern, std::string_view subject) {
  auto pattern_tokens = split_tokens(pattern);
  auto subject_tokens = split_tokens(subject);
  std::size_t i = 0;
  for (; i < pattern_tokens.size(); ++i) {
    std::string_view p = pattern_tokens[i];
    if (p == ">") return subject_tokens.size() >= i + 1;  // one-or-more remaining
    if (i >= subject_tokens.size()) return false;
    if (p == "*") continue;
    if (p != subject_tokens[i]) return false;
  }
  return i == subject_tokens.size();
}

bool pattern_covers(std::string_view allowed, std::string_view requested) {
  auto a = split_tokens(allowed);
  auto r = split_tokens(requested);
  std::size_t i = 0;
  for (; i < a.size(); ++i) {
    if (a[i] == ">") return r.size() >= i + 1;
    if (i >= r.size()) return false;
    if (r[i] == ">") return false;  // requested is broader
    if (a[i] == "*") continue;
    if (r[i] == "*" || a[i] != r[i]) return false;
  }
  return i == r.size();
}

bool AuthToken::may_publish(std::string_view subject) const {
  for (const std::string& pattern : allowed_publish)
    if (match_subject(pattern, subject)) return true;
  return false;
}

bool AuthToken::may_subscribe(std::string_view pattern) const {
  for (const std::string& allowed : allowed_subscribe)
    if (pattern_covers(allowed, pattern)) return true;
  return false;
}

Broker::Broker(std::map<std::string, AuthToken> tokens) : tokens_(std::move(tokens)) {}

std::optional<ConnId> Broker::connect(const std::string& token) {
  std::lock_guard lock(mutex_);
  auto it = tokens_.find(token);
  if (it == tokens_.end()) return std::nullopt;
  ConnId id = next_conn_++;
  connections_[id] = Connection{it->second, nullptr};
  return id;
}

void Broker::set_sink(ConnId conn, Sink sink) {
  std::lock_guard lock(mutex_);
  auto it = connections_.find(conn);
  if (it != connections_.end()) it->second.sink = std::make_shared<Sink>(std::move(sink));
}

void Broker::disconnect(ConnId conn) {
  std::lock_guard lock(mutex_);
  connections_.erase(conn);
  std::erase_if(subscriptions_, [conn](const Subscription& s) { return s.conn == conn; });
}

OpResult Broker::subscribe(ConnId conn, const std::string& pattern, const std::string& sid) {
  std::lock_guard lock(mutex_);
  auto it = connections_.find(conn);
  if (it == connections_.end()) return OpResult::fail("not connected");
  if (!valid_subject(pattern, /*allow_wildcards=*/true))
    return OpResult::fail("invalid subject pattern '" + pattern + "'");
  if (!it->second.token.may_subscribe(pattern))
    return OpResult::fail("permissions violation for subscription to '" + pattern + "'");
  for (const Subscription& s : subscriptions_)
    if (s.conn == conn && s.sid == sid) return OpResult::fail("duplicate sid '" + sid + "'");
  subscriptions_.push_back({conn, pattern, sid});
  return {};
}

OpResult Broker::unsubscribe(ConnId conn, const std::string& sid) {
  std::lock_guard lock(mutex_);
  auto before = subscriptions_.size();
  std::erase_if(subscriptions_,
                [&](const Subscription& s) { return s.conn == conn && s.sid == sid; });
  if (subscriptions_.size() == before) return OpResult::fail("unknown sid '" + sid + "'");
  return {};
}

OpResult Broker::publish(ConnId conn, const std::string& subject, const std::string& payload,
                         std::size_t* delivered) {
  struct Target {
    std::shared_ptr<Sink> sink;
    std::string sid;
  };
  std::vector<Target> targets;
  {
    std::lock_guard lock(mutex_);
    auto it = connections_.find(conn);
    if (it == connections_.end()) return OpResult::fail("not connected");
    if (!valid_subject(subject, /*allow_wildcards=*/false))
      return OpResult::fail("invalid subject '" + subject + "'");
    if (!it->second.token.may_publish(subject))
      return OpResult::fail("permissions violation for publish to '" + subject + "'");
    for (const Subscription& s : subscriptions_) {
      if (!match_subject(s.pattern, subject)) continue;
      auto target = connections_.find(s.conn);
      if (target == connections_.end() || !target->second.sink) continue;
      targets.push_back({target->second.sink, s.sid});
    }
  }
  for (const Target& target : targets) (*target.sink)(target.sid, subject, payload);
  if (delivered) *delivered = targets.size();
  return {};
}

std::size_t Broker::subscription_count() const {
  std::lock_guard lock(mutex_);
  return subscriptions_.size();
}

// ---------------------------------------------------------------------------
// TCP server

struct Server::Conn {
  int fd = -1;
  std::optional<ConnId> broker_id;
  std::string inbox;

  std::mutex write_mutex;
  std::condition_variable write_cv;
  std::deque<std::pair<std::string, std::string>> outbox;  // frame, sid ("" = control)
  std::map<std::string, std::size_t> pending_by_sid;
  bool closing = false;

  std::thread reader;
  std::thread writer;
};

namespace {

bool send_all(int fd, std::string_view bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace

Server::Server(ServerOptions options) : options_(std::move(options)), broker_(options_.tokens) {}

Server::~Server() { stop(); }

bool Server::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) return false;
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(options_.port));
  ::inet_pton(AF_INET, options_.bind_host.c_str(), &addr.sin_addr);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    return false;
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  accept_thread_ = std::thread([this] { accept_loop(); });
  return true;
}

void Server::stop() {
  if (stopping_.exchange(true)) return;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::shared_ptr<Conn>> conns;
  {
    std::lock_guard lock(conns_mutex_);
    conns = conns_;
    conns_.clear();
  }
  for (auto& conn : conns) {
    {
      std::lock_guard lock(conn->write_mutex);
      conn->closing = true;
    }
    conn->write_cv.notify_all();
    if (conn->fd >= 0) ::shutdown(conn->fd, SHUT_RDWR);
    if (conn->reader.joinable()) conn->reader.join();
    if (conn->writer.joinable()) conn->writer.join();
    if (conn->fd >= 0) ::close(conn->fd);
  }
}

void Server::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) break;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    auto conn = std::make_shared<Conn>();
    conn->fd = fd;
    {
      std::lock_guard lock(conns_mutex_);
      conns_.push_back(conn);
    }
    conn->reader = std::thread([this, conn] { reader_loop(conn); });
    conn->writer = std::thread([this, conn] { writer_loop(conn); });
  }
}

void Server::enqueue_control(Conn& conn, std::string frame) {
  {
    std::lock_guard lock(conn.write_mutex);
    if (conn.closing) return;
    conn.outbox.push_back({std::move(frame), ""});
  }
  conn.write_cv.notify_one();
}

void Server::enqueue(const std::shared_ptr<Conn>& conn, const std::string& sid,
                     std::string frame) {
  bool evict = false;
  {
    std::lock_guard lock(conn->write_mutex);
    if (conn->closing) return;
    std::size_t& pending = conn->pending_by_sid[sid];
    if (pending + frame.size() > options_.pending_limit_bytes) {
      evict = true;
      // Drop what this subscription had queued; other sids keep flowing.
      std::erase_if(conn->outbox,
                    [&](const std::pair<std::string, std::string>& f) { return f.second == sid; });
      conn->pending_by_sid.erase(sid);
    } else {
      pending += frame.size();
      conn->outbox.push_back({std::move(frame), sid});
    }
  }
  conn->write_cv.notify_one();
  if (evict && conn->broker_id.has_value()) {
    broker_.unsubscribe(*conn->broker_id, sid);
    enqueue_control(*conn, "-ERR slow consumer: subscription '" + sid + "' evicted\r\n");
  }
}

void Server::writer_loop(std::shared_ptr<Conn> conn) {
  while (true) {
    std::pair<std::string, std::string> item;
    {
      std::unique_lock lock(conn->write_mutex);
      conn->write_cv.wait(lock, [&] { return conn->closing || !conn->outbox.empty(); });
      if (conn->closing && conn->outbox.empty()) return;
      item = std::move(conn->outbox.front());
      conn->outbox.pop_front();
      if (!item.second.empty()) {
        auto it = conn->pending_by_sid.find(item.second);
        if (it != conn->pending_by_sid.end()) {
          it->second -= std::min(it->second, item.first.size());
        }
      }
    }
    if (!send_all(conn->fd, item.first)) return;
  }
}

void Server::reader_loop(std::shared_ptr<Conn> conn) {
  char buf[16384];
  while (!stopping_) {
    // Complete lines (and PUB payloads) are consumed from the inbox.
    while (true) {
      auto nl = conn->inbox.find("\r\n");
      if (nl == std::string::npos) break;
      std::string line = conn->inbox.substr(0, nl);

      if (line.rfind("PUB ", 0) == 0) {
        auto second_space = line.rfind(' ');
        std::size_t nbytes = 0;
        bool header_ok = second_space != std::string::npos && second_space > 4;
        if (header_ok) {
          try {
            nbytes = std::stoull(line.substr(second_space + 1));
          } catch (const std::exception&) {
            header_ok = false;
          }
        }
        if (!header_ok) {
          conn->inbox.erase(0, nl + 2);
          enqueue_control(*conn, "-ERR malformed PUB\r\n");
          continue;
        }
        if (conn->inbox.size() < nl + 2 + nbytes + 2) break;  // payload incomplete
        std::string payload = conn->inbox.substr(nl + 2, nbytes);
        conn->inbox.erase(0, nl + 2 + nbytes + 2);
        std::string subject = line.substr(4, second_space - 4);
        if (!conn->broker_id.has_value()) {
          enqueue_control(*conn, "-ERR not authenticated\r\n");
          continue;
        }
        OpResult result = broker_.publish(*conn->broker_id, subject, payload);
        enqueue_control(*conn, result.ok ? "+OK\r\n" : "-ERR " + result.error + "\r\n");
        continue;
      }

      conn->inbox.erase(0, nl + 2);
      handle_line(*conn, line);
    }

    ssize_t n = ::recv(conn->fd, buf, sizeof(buf), 0);
    if (n <= 0) break;
    conn->inbox.append(buf, static_cast<std::size_t>(n));
  }
  if (conn->broker_id.has_value()) broker_.disconnect(*conn->broker_id);
  {
    std::lock_guard lock(conn->write_mutex);
    conn->closing = true;
  }
  conn->write_cv.notify_all();
}

void Server::handle_line(Conn& conn, const std::string& line) {
  if (line.rfind("CONNECT ", 0) == 0) {
    Json j = Json::parse(line.substr(8), nullptr, false);
    std::string token = j.is_object() ? j.value("token", "") : "";
    auto id = broker_.connect(token);
    if (!id.has_value()) {
      enqueue_control(conn, "-ERR authorization violation\r\n");
      return;
    }
    conn.broker_id = id;
    // Deliveries render MSG frames into this connection's outbox.
    std::weak_ptr<Conn> weak;
    {
      std::lock_guard lock(conns_mutex_);
      for (const auto& c : conns_)
        if (c.get() == &conn) weak = c;
    }
    broker_.set_sink(*id, [this, weak](const std::string& sid, const std::string& subject,
                                       const std::string& payload) {
      auto strong = weak.lock();
      if (!strong) return;
      std::string frame = "MSG " + subject + " " + sid + " " + std::to_string(payload.size()) +
                          "\r\n" + payload + "\r\n";
      enqueue(strong, sid, std::move(frame));
    });
    enqueue_control(conn, "+OK\r\n");
    return;
  }
  if (line == "PING") {
    enqueue_control(conn, "PONG\r\n");
    return;
  }
  if (!conn.broker_id.has_value()) {
    enqueue_control(conn, "-ERR not authenticated\r\n");
    return;
  }
  if (line.rfind("SUB ", 0) == 0) {
    auto space = line.find(' ', 4);
    if (space == std::string::npos) {
      enqueue_control(conn, "-ERR malformed SUB\r\n");
      return;
    }
    std::string pattern = line.substr(4, space - 4);
    std::string sid = line.substr(space + 1);
    if (sid.empty() || sid.find(' ') != std::string::npos) {
      enqueue_control(conn, "-ERR malformed SUB\r\n");
      return;
    }
    OpResult result = broker_.subscribe(*conn.broker_id, pattern, sid);
    enqueue_control(conn, result.ok ? "+OK\r\n" : "-ERR " + result.error + "\r\n");
    return;
  }
  if (line.rfind("UNSUB ", 0) == 0) {
    OpResult result = broker_.unsubscribe(*conn.broker_id, line.substr(6));
    enqueue_control(conn, result.ok ? "+OK\r\n" : "-ERR " + result.error + "\r\n");
    return;
  }
  enqueue_control(conn, "-ERR unknown command\r\n");
}

// ---------------------------------------------------------------------------
// Client

Client::~Client() { close(); }

bool Client::connect(const std::string& host, int port, const std::string& token,
                     std::string* error) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) return false;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (error) *error = "cannot connect to " + host + ":" + std::to_string(port);
    ::close(fd_);
    fd_ = -1;
    return false;
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  closed_ = false;
  reader_ = std::thread([this] { reader_loop(); });

  Json connect_json;
  connect_json["token"] = token;
  std::string frame = "CONNECT " + connect_json.dump() + "\r\n";
  if (!send_all(fd_, frame)) {
    if (error) *error = "connect write failed";
    close();
    return false;
  }
  OpResult ack = await_ack();
  if (!ack.ok) {
    if (error) *error = ack.error.empty() ? "authorization failed" : ack.error;
    close();
    return false;
  }
  return true;
}

void Client::close() {
  int fd = fd_;
  fd_ = -1;
  if (fd >= 0) {
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
  }
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
  if (reader_.joinable()) reader_.join();
}

void Client::reader_loop() {
  std::string inbox;
  char buf[16384];
  int fd = fd_;
  while (fd >= 0) {
    while (true) {
      auto nl = inbox.find("\r\n");
      if (nl == std::string::npos) break;
      std::string line = inbox.substr(0, nl);
      if (line.rfind("MSG ", 0) == 0) {
        auto first = line.find(' ', 4);
        auto second = first == std::string::npos ? std::string::npos : line.find(' ', first + 1);
        if (first == std::string::npos || second == std::string::npos) {
          inbox.erase(0, nl + 2);
          continue;
        }
        std::size_t nbytes = std::stoull(line.substr(second + 1));
        if (inbox.size() < nl + 2 + nbytes + 2) break;
        Message msg;
        msg.subject = line.substr(4, first - 4);
        msg.sid = line.substr(first + 1, second - first - 1);
        msg.payload = inbox.substr(nl + 2, nbytes);
        inbox.erase(0, nl + 2 + nbytes + 2);
        {
          std::lock_guard lock(mutex_);
          messages_.push_back(std::move(msg));
        }
        cv_.notify_all();
        continue;
      }
      inbox.erase(0, nl + 2);
      if (line == "+OK" || line == "PONG") {
        std::lock_guard lock(mutex_);
        acks_.push_back({true, ""});
        cv_.notify_all();
      } else if (line.rfind("-ERR ", 0) == 0) {
        std::lock_guard lock(mutex_);
        acks_.push_back({false, line.substr(5)});
        cv_.notify_all();
      }
      // Unsolicited notices (e.g. slow-consumer evictions) are -ERR too;
      // they surface as failed acks on the next await if no command is in
      // flight, which the CLI reports verbatim.
    }
    ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
    if (n <= 0) break;
    inbox.append(buf, static_cast<std::size_t>(n));
  }
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

OpResult Client::await_ack() {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, std::chrono::seconds(5), [this] { return !acks_.empty() || closed_; });
  if (acks_.empty()) return OpResult::fail("timeout waiting for server response");
  OpResult result = std::move(acks_.front());
  acks_.pop_front();
  return result;
}

OpResult Client::subscribe(const std::string& pattern, const std::string& sid) {
  if (!send_all(fd_, "SUB " + pattern + " " + sid + "\r\n")) return OpResult::fail("send failed");
  return await_ack();
}

OpResult Client::unsubscribe(const std::string& sid) {
  if (!send_all(fd_, "UNSUB " + sid + "\r\n")) return OpResult::fail("send failed");
  return await_ack();
}

OpResult Client::publish(const std::string& subject, const std::string& payload) {
  std::string frame =
      "PUB " + subject + " " + std::to_string(payload.size()) + "\r\n" + payload + "\r\n";
  if (!send_all(fd_, frame)) return OpResult::fail("send failed");
  return await_ack();
}

OpResult Client::ping() {
  if (!send_all(fd_, "PING\r\n")) return OpResult::fail("send failed");
  return await_ack();
}

std::optional<Message> Client::next_message(std::int64_t timeout_ms) {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
               [this] { return !messages_.empty() || closed_; });
  if (messages_.empty()) return std::nullopt;
  Message msg = std::move(messages_.front());
  messages_.pop_front();
  return msg;
}

// ---------------------------------------------------------------------------
// Bridge

Bridge::Bridge(tsdb::Store& store, BridgeOptions options)
    : store_(store), options_(std::move(options)) {}

Bridge::~Bridge() { stop(); }

std::optional<tsdb::MetricPoint> Bridge::decode(const std::string& payload, Timestamp arrival) {
  Json j = Json::parse(payload, nullptr, false);
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) return std::nullopt;
  if (!j.contains("value") || !j["value"].is_number()) return std::nullopt;
  tsdb::MetricPoint point;
  point.key.name = j["name"].get<std::string>();
  if (!validate_name(point.key.name)) return std::nullopt;
  if (j.contains("tags")) {
    if (!j["tags"].is_object()) return std::nullopt;
    for (const auto& [tag, value] : j["tags"].items()) {
      if (!validate_name(tag) || !value.is_string()) return std::nullopt;
      point.key.tags.set(tag, value.get<std::string>());
    }
  }
  point.value = j["value"].get<double>();
  point.ts = arrival;
  if (j.contains("ts")) {
    if (!j["ts"].is_number_integer()) return std::nullopt;
    point.ts = Timestamp{j["ts"].get<std::int64_t>()};
  }
  return point;
}

bool Bridge::start(std::string* error) {
  if (!client_.connect(options_.host, options_.port, options_.token, error)) return false;
  for (std::size_t i = 0; i < options_.patterns.size(); ++i) {
    OpResult result = client_.subscribe(options_.patterns[i], "bridge" + std::to_string(i));
    if (!result.ok) {
      if (error) *error = result.error;
      return false;
    }
  }
  thread_ = std::thread([this] { run(); });
  return true;
}

void Bridge::stop() {
  stopping_ = true;
  client_.close();
  if (thread_.joinable()) thread_.join();
}

void Bridge::run() {
  while (!stopping_) {
    auto msg = client_.next_message(200);
    if (!msg.has_value()) continue;
    Timestamp arrival = store_.clock_now();
    auto point = decode(msg->payload, arrival);
    std::lock_guard lock(stats_mutex_);
    ++stats_.received;
    if (!point.has_value()) {
      ++stats_.dropped;
      continue;
    }
    if (store_.write(*point).ok())
      ++stats_.written;
    else
      ++stats_.dropped;
  }
}

BridgeStats Bridge::stats() const {
  std::lock_guard lock(stats_mutex_);
  return stats_;
}

}  // namespace minimon::pubsub
