#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <memory>
#include <random>
#include <thread>

#include "minimon/pubsub.hpp"
#include "minimon/tsdb.hpp"

using namespace minimon;
using namespace minimon::pubsub;

namespace {

std::map<std::string, AuthToken> open_tokens() {
  AuthToken token;
  token.token = "t0ken";
  token.allowed_publish = {">"};
  token.allowed_subscribe = {">"};
  return {{token.token, token}};
}

// Independent recursive matcher used as the oracle.
bool oracle_match(const std::vector<std::string>& pattern, std::size_t pi,
                  const std::vector<std::string>& subject, std::size_t si) {
  if (pi == pattern.size()) return si == subject.size();
  if (pattern[pi] == ">") return si < subject.size();
  if (si == subject.size()) return false;
  if (pattern[pi] != "*" && pattern[pi] != subject[si]) return false;
  return oracle_match(pattern, pi + 1, subject, si + 1);
}

std::vector<std::string> tokens_of(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto dot = s.find('.', start);
    if (dot == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, dot - start));
    start = dot + 1;
  }
}

/// Raw TCP connection for bit-exact protocol checks.
struct RawConn {
  int fd = -1;

  bool connect(int port) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    timeval tv{3, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    return ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0;
  }
  void send_bytes(const std::string& bytes) {
    REQUIRE(::send(fd, bytes.data(), bytes.size(), 0) == static_cast<ssize_t>(bytes.size()));
  }
  std::string recv_exactly(std::size_t n) {
    std::string out(n, '\0');
    std::size_t got = 0;
    while (got < n) {
      ssize_t r = ::recv(fd, out.data() + got, n - got, 0);
      if (r <= 0) break;
      got += static_cast<std::size_t>(r);
    }
    out.resize(got);
    return out;
  }
  ~RawConn() {
    if (fd >= 0) ::close(fd);
  }
};

}  // namespace

TEST_CASE("subject matching: spec examples") {
  CHECK(match_subject("cms.*.exitCode", "cms.wma.exitCode"));
  CHECK_FALSE(match_subject("cms.>", "cms"));  // > needs at least one token
  CHECK_FALSE(match_subject("cms.jobs", "cms.jobs.t1"));
  CHECK(match_subject("cms.>", "cms.jobs"));
  CHECK(match_subject("cms.>", "cms.jobs.t1.deep"));
  CHECK(match_subject("*", "anything"));
  CHECK_FALSE(match_subject("*", "two.tokens"));
  CHECK(match_subject("cms.jobs", "cms.jobs"));
}

TEST_CASE("subject validity") {
  CHECK(valid_subject("cms.wmarchive.exitCode", false));
  CHECK_FALSE(valid_subject("cms..x", false));
  CHECK_FALSE(valid_subject(".cms", false));
  CHECK_FALSE(valid_subject("cms.", false));
  CHECK_FALSE(valid_subject("has space", false));
  CHECK_FALSE(valid_subject("cms.*", false));     // wildcard in a literal subject
  CHECK(valid_subject("cms.*", true));
  CHECK(valid_subject("cms.>", true));
  CHECK_FALSE(valid_subject(">.cms", true));      // > only in final position
  CHECK_FALSE(valid_subject("cms.x>", true));     // wildcards are whole tokens
  CHECK_FALSE(valid_subject("cms.x*", true));
}

TEST_CASE("pattern permission containment") {
  CHECK(pattern_covers("cms.>", "cms.jobs.*"));
  CHECK(pattern_covers("cms.>", "cms.jobs.>"));
  CHECK(pattern_covers(">", "anything.at.all"));
  CHECK_FALSE(pattern_covers("cms.jobs", "cms.>"));
  CHECK_FALSE(pattern_covers("cms.*", "cms.>"));
  CHECK(pattern_covers("cms.*", "cms.jobs"));
  CHECK_FALSE(pattern_covers("cms.*", "other.jobs"));
  CHECK_FALSE(pattern_covers("cms.jobs", "cms.*"));  // requested is broader
}

TEST_CASE("match_subject equals the oracle on randomized pairs") {
  std::mt19937_64 rng(99);
  const char* tokens[] = {"cms", "jobs", "t1", "x", "y"};
  auto random_subject = [&](bool wildcards) {
    int n = 1 + static_cast<int>(rng() % 4);
    std::string out;
    for (int i = 0; i < n; ++i) {
      if (i > 0) out += ".";
      if (wildcards && rng() % 5 == 0) {
        if (i + 1 == n && rng() % 2 == 0) {
          out += ">";
          break;
        }
        out += "*";
      } else {
        out += tokens[rng() % 5];
      }
    }
    return out;
  };

  int checked = 0;
  while (checked < 2000) {
    std::string pattern = random_subject(true);
    std::string subject = random_subject(false);
    if (!valid_subject(pattern, true) || !valid_subject(subject, false)) continue;
    CAPTURE(pattern);
    CAPTURE(subject);
    CHECK(match_subject(pattern, subject) ==
          oracle_match(tokens_of(pattern), 0, tokens_of(subject), 0));
    ++checked;
  }
}

TEST_CASE("broker fan-out: delivery set equals the brute-force matcher") {
  Broker broker(open_tokens());
  std::mt19937_64 rng(123);
  const char* tokens[] = {"a", "b", "c"};

  struct Sub {
    ConnId conn;
    std::string pattern;
    std::shared_ptr<std::vector<std::string>> inbox;
  };
  std::vector<Sub> subs;
  for (int i = 0; i < 40; ++i) {
    auto conn = broker.connect("t0ken");
    REQUIRE(conn.has_value());
    std::string pattern;
    int n = 1 + static_cast<int>(rng() % 3);
    for (int t = 0; t < n; ++t) {
      if (t > 0) pattern += ".";
      int pick = static_cast<int>(rng() % 5);
      if (pick == 3 && t + 1 == n)
        pattern += ">";
      else if (pick == 4)
        pattern += "*";
      else
        pattern += tokens[rng() % 3];
    }
    auto inbox = std::make_shared<std::vector<std::string>>();
    broker.set_sink(*conn, [inbox](const std::string&, const std::string& subject,
                                   const std::string&) { inbox->push_back(subject); });
    REQUIRE(broker.subscribe(*conn, pattern, "s").ok);
    subs.push_back({*conn, pattern, inbox});
  }

  auto publisher = broker.connect("t0ken");
  REQUIRE(publisher.has_value());
  for (int round = 0; round < 1000; ++round) {
    std::string subject;
    int n = 1 + static_cast<int>(rng() % 3);
    for (int t = 0; t < n; ++t) {
      if (t > 0) subject += ".";
      subject += tokens[rng() % 3];
    }
    for (auto& sub : subs) sub.inbox->clear();
    std::size_t delivered = 0;
    REQUIRE(broker.publish(*publisher, subject, "x", &delivered).ok);
    std::size_t expected = 0;
    for (const auto& sub : subs) {
      bool want = oracle_match(tokens_of(sub.pattern), 0, tokens_of(subject), 0);
      if (want) ++expected;
      CHECK(sub.inbox->size() == (want ? 1u : 0u));
    }
    CHECK(delivered == expected);
  }
}

TEST_CASE("no persistence: a late subscriber receives nothing") {
  Broker broker(open_tokens());
  auto publisher = broker.connect("t0ken");
  std::size_t delivered = 0;
  broker.publish(*publisher, "cms.jobs", "before", &delivered);
  CHECK(delivered == 0);

  auto late = broker.connect("t0ken");
  auto inbox = std::make_shared<std::vector<std::string>>();
  broker.set_sink(*late, [inbox](const std::string&, const std::string&,
                                 const std::string& payload) { inbox->push_back(payload); });
  broker.subscribe(*late, "cms.>", "s");
  CHECK(inbox->empty());

  broker.publish(*publisher, "cms.jobs", "after", &delivered);
  CHECK(delivered == 1);
  REQUIRE(inbox->size() == 1);
  CHECK((*inbox)[0] == "after");
}

TEST_CASE("broker authorization") {
  AuthToken narrow;
  narrow.token = "narrow";
  narrow.allowed_publish = {"cms.metrics.>"};
  narrow.allowed_subscribe = {"cms.metrics.>"};
  AuthToken deny_all;
  deny_all.token = "deny";
  Broker broker({{narrow.token, narrow}, {deny_all.token, deny_all}});

  CHECK_FALSE(broker.connect("wrong").has_value());

  auto conn = broker.connect("narrow");
  REQUIRE(conn.has_value());
  CHECK(broker.publish(*conn, "cms.metrics.cpu", "x").ok);
  CHECK_FALSE(broker.publish(*conn, "cms.other", "x").ok);
  CHECK(broker.subscribe(*conn, "cms.metrics.*", "a").ok);
  CHECK_FALSE(broker.subscribe(*conn, "cms.>", "b").ok);

  auto denied = broker.connect("deny");
  REQUIRE(denied.has_value());  // empty lists authenticate but allow nothing
  CHECK_FALSE(broker.publish(*denied, "cms.metrics.cpu", "x").ok);
  CHECK_FALSE(broker.subscribe(*denied, "cms.metrics.cpu", "s").ok);
}

TEST_CASE("duplicate sid on one connection is rejected") {
  Broker broker(open_tokens());
  auto conn = broker.connect("t0ken");
  CHECK(broker.subscribe(*conn, "a", "sid1").ok);
  CHECK_FALSE(broker.subscribe(*conn, "b", "sid1").ok);
  CHECK(broker.unsubscribe(*conn, "sid1").ok);
  CHECK(broker.subscribe(*conn, "b", "sid1").ok);
  CHECK_FALSE(broker.unsubscribe(*conn, "ghost").ok);
}

TEST_CASE("wire protocol is bit-exact") {
  ServerOptions options;
  options.tokens = open_tokens();
  Server server(options);
  REQUIRE(server.start());

  RawConn conn;
  REQUIRE(conn.connect(server.port()));

  conn.send_bytes("CONNECT {\"token\":\"t0ken\"}\r\n");
  CHECK(conn.recv_exactly(5) == "+OK\r\n");

  conn.send_bytes("SUB cms.> s1\r\n");
  CHECK(conn.recv_exactly(5) == "+OK\r\n");

  conn.send_bytes("PING\r\n");
  CHECK(conn.recv_exactly(6) == "PONG\r\n");

  conn.send_bytes("PUB cms.jobs 5\r\nhello\r\n");
  // Self-delivery: the MSG frame and the publish ack, bit for bit.
  std::string expect_msg = "MSG cms.jobs s1 5\r\nhello\r\n";
  std::string got = conn.recv_exactly(5 + expect_msg.size());
  // +OK and MSG can interleave in either order; accept both serializations.
  bool ok_first = got == "+OK\r\n" + expect_msg;
  bool msg_first = got == expect_msg + "+OK\r\n";
  CHECK((ok_first || msg_first));

  conn.send_bytes("UNSUB s1\r\n");
  CHECK(conn.recv_exactly(5) == "+OK\r\n");

  conn.send_bytes("PUB cms.jobs 2\r\nhi\r\n");
  CHECK(conn.recv_exactly(5) == "+OK\r\n");  // no MSG after unsubscribe

  server.stop();
}

TEST_CASE("wire protocol error paths") {
  ServerOptions options;
  options.tokens = open_tokens();
  Server server(options);
  REQUIRE(server.start());

  SUBCASE("bad token") {
    RawConn conn;
    REQUIRE(conn.connect(server.port()));
    conn.send_bytes("CONNECT {\"token\":\"nope\"}\r\n");
    CHECK(conn.recv_exactly(30) == "-ERR authorization violation\r\n");
  }
  SUBCASE("commands before CONNECT") {
    RawConn conn;
    REQUIRE(conn.connect(server.port()));
    conn.send_bytes("SUB cms.> s1\r\n");
    CHECK(conn.recv_exactly(24) == "-ERR not authenticated\r\n");
  }
  SUBCASE("unknown command") {
    RawConn conn;
    REQUIRE(conn.connect(server.port()));
    conn.send_bytes("CONNECT {\"token\":\"t0ken\"}\r\n");
    conn.recv_exactly(5);
    conn.send_bytes("BOGUS\r\n");
    CHECK(conn.recv_exactly(22) == "-ERR unknown command\r\n");
  }
  server.stop();
}

TEST_CASE("client API against a live server") {
  ServerOptions options;
  options.tokens = open_tokens();
  Server server(options);
  REQUIRE(server.start());

  Client subscriber;
  REQUIRE(subscriber.connect("127.0.0.1", server.port(), "t0ken"));
  REQUIRE(subscriber.subscribe("cms.*.exit", "s1").ok);

  Client publisher;
  REQUIRE(publisher.connect("127.0.0.1", server.port(), "t0ken"));
  REQUIRE(publisher.publish("cms.wma.exit", "payload \xf0\x9f\x9a\x80 bytes").ok);

  auto msg = subscriber.next_message(2000);
  REQUIRE(msg.has_value());
  CHECK(msg->subject == "cms.wma.exit");
  CHECK(msg->sid == "s1");
  CHECK(msg->payload == "payload \xf0\x9f\x9a\x80 bytes");

  CHECK(subscriber.ping().ok);
  CHECK_FALSE(publisher.publish("bad subject", "x").ok);

  subscriber.close();
  publisher.close();
  server.stop();
}

TEST_CASE("auth failure surfaces through the client") {
  ServerOptions options;
  options.tokens = open_tokens();
  Server server(options);
  REQUIRE(server.start());
  Client client;
  std::string error;
  CHECK_FALSE(client.connect("127.0.0.1", server.port(), "wrong", &error));
  CHECK(error.find("authorization") != std::string::npos);
  server.stop();
}

TEST_CASE("slow consumer is evicted; other subscribers are unaffected") {
  ServerOptions options;
  options.tokens = open_tokens();
  options.pending_limit_bytes = 256 * 1024;
  Server server(options);
  REQUIRE(server.start());

  // The stalled reader subscribes and then never reads its socket.
  RawConn stalled;
  REQUIRE(stalled.connect(server.port()));
  stalled.send_bytes("CONNECT {\"token\":\"t0ken\"}\r\n");
  REQUIRE(stalled.recv_exactly(5) == "+OK\r\n");
  stalled.send_bytes("SUB cms.> slow\r\n");
  REQUIRE(stalled.recv_exactly(5) == "+OK\r\n");

  Client healthy;
  REQUIRE(healthy.connect("127.0.0.1", server.port(), "t0ken"));
  REQUIRE(healthy.subscribe("cms.>", "fast").ok);

  std::atomic<std::size_t> received{0};
  std::thread drainer([&] {
    while (true) {
      auto msg = healthy.next_message(2000);
      if (!msg.has_value()) break;
      ++received;
    }
  });

  Client publisher;
  REQUIRE(publisher.connect("127.0.0.1", server.port(), "t0ken"));
  std::string payload(64 * 1024, 'x');
  std::size_t published = 0;
  // Publish until the slow subscription is evicted (cap well above the
  // point where kernel buffers plus the pending limit must overflow).
  for (int i = 0; i < 600; ++i) {
    REQUIRE(publisher.publish("cms.load", payload).ok);
    ++published;
    if (server.subscription_count() == 1) break;
  }
  CHECK(server.subscription_count() == 1);  // the slow one is gone

  // Everything published was delivered to the healthy subscriber.
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
  while (received < published && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  CHECK(received == published);

  healthy.close();
  drainer.join();
  publisher.close();
  server.stop();
}

TEST_CASE("bridge decodes metric payloads") {
  Timestamp arrival{1000};
  auto point = Bridge::decode(R"({"name":"exitCode","tags":{"site":"T2"},"value":0})", arrival);
  REQUIRE(point.has_value());
  CHECK(point->key.name == "exitCode");
  CHECK(point->key.tags.get_or_empty("site") == "T2");
  CHECK(point->value == 0.0);
  CHECK(point->ts == arrival);  // missing ts falls back to arrival

  point = Bridge::decode(R"({"name":"m","value":1.5,"ts":123})", arrival);
  REQUIRE(point.has_value());
  CHECK(point->ts.ms == 123);

  CHECK_FALSE(Bridge::decode("not json", arrival).has_value());
  CHECK_FALSE(Bridge::decode(R"({"value":1})", arrival).has_value());
  CHECK_FALSE(Bridge::decode(R"({"name":"m"})", arrival).has_value());
  CHECK_FALSE(Bridge::decode(R"({"name":"bad name","value":1})", arrival).has_value());
  CHECK_FALSE(Bridge::decode(R"({"name":"m","value":"high"})", arrival).has_value());
}

TEST_CASE("bridge feeds the tsdb and reconciles burst counts") {
  ServerOptions options;
  options.tokens = open_tokens();
  Server server(options);
  REQUIRE(server.start());

  std::int64_t now = 1577836800000;
  tsdb::StoreOptions store_options;
  store_options.clock = [now] { return Timestamp{now}; };
  tsdb::Store store(store_options);

  BridgeOptions bridge_options;
  bridge_options.host = "127.0.0.1";
  bridge_options.port = server.port();
  bridge_options.token = "t0ken";
  bridge_options.patterns = {"cms.>"};
  Bridge bridge(store, bridge_options);
  REQUIRE(bridge.start());

  Client publisher;
  REQUIRE(publisher.connect("127.0.0.1", server.port(), "t0ken"));
  const std::size_t kTotal = 5000;
  std::size_t malformed = 0;
  for (std::size_t i = 0; i < kTotal; ++i) {
    if (i % 7 == 0) {
      REQUIRE(publisher.publish("cms.jobs.x", "garbage").ok);
      ++malformed;
    } else {
      Json payload;
      payload["name"] = "exitCode";
      payload["tags"] = {{"site", "T" + std::to_string(i % 5)}};
      payload["value"] = static_cast<double>(i % 3);
      payload["ts"] = now + static_cast<std::int64_t>(i);
      REQUIRE(publisher.publish("cms.jobs.x", payload.dump()).ok);
    }
  }

  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
  while (bridge.stats().received < kTotal && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(std::chrono::milliseconds(20));

  BridgeStats stats = bridge.stats();
  CHECK(stats.received == kTotal);
  CHECK(stats.written + stats.dropped == kTotal);  // count reconciliation
  CHECK(stats.dropped == malformed);
  CHECK(store.cardinality().total_points == stats.written);

  bridge.stop();
  publisher.close();
  server.stop();
}
