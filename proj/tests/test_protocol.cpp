#include "test_util.hpp"

#include "fedgin/protocol.hpp"
#include "fedgin/transport.hpp"
#include "fedgin/unet.hpp"

#include <doctest.h>

#include <limits>
#include <thread>

using namespace fedgin;

namespace {

ModelParams small_model(std::uint64_t seed = 1) {
  UNetConfig c;
  c.base_channels = 2;
  c.depth = 1;
  RngStream r(seed);
  return build_model(c, r);
}

}  // namespace

TEST_SUITE("protocol") {

TEST_CASE("crc32 matches the standard check value") {
  const std::string s = "123456789";
  CHECK(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
}

TEST_CASE("parameter blobs") {
  const ModelParams p = small_model();
  const Bytes blob = serialize_params(p);
  CHECK(blob[0] == 'F');
  CHECK(blob[1] == 'G');
  CHECK(blob[2] == 'W');
  CHECK(blob[3] == 'T');
  const ModelParams q = deserialize_params(blob);
  CHECK(bitwise_equal(p, q));
  for (const auto& e : q.entries()) CHECK(e.tensor.requires_grad() == !is_running_stat(e.name));

  for (std::size_t pos : {std::size_t{20}, blob.size() / 2, blob.size() - 5}) {
    Bytes bad = blob;
    bad[pos] ^= 0x01;
    CHECK_THROWS_AS(deserialize_params(bad), ChecksumError);
  }
  Bytes cut(blob.begin(), blob.end() - 1);
  CHECK_THROWS_AS(deserialize_params(cut), FormatError);

  const Bytes empty = serialize_params(ModelParams{});
  // magic 4 + version 2 + count 4 + crc 4
  CHECK(empty.size() == 14);
  CHECK(deserialize_params(empty).size() == 0);

  ModelParams nan;
  nan.add("w", Tensor::zeros({2}));
  nan.at("w").mutable_data()[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH(serialize_params(nan), doctest::Contains("w"));

  const auto dir = testutil::temp_dir("params");
  save_params(p, dir / "p.fgwt");
  CHECK(bitwise_equal(load_params(dir / "p.fgwt"), p));
}

TEST_CASE("frames round trip every message type") {
  const Bytes blob = serialize_params(small_model());
  std::vector<RoundMessage> msgs{make_register("alpha", 64), make_global_model(3, 2.5e-4, 1, blob),
                                 make_local_update(3, "alpha", 64, {{"train_loss", 0.25}}, blob),
                                 make_decline(4, "beta", "no local training data"), make_shutdown(9)};
  for (const auto& m : msgs) {
    const Bytes f = encode_frame(m);
    CHECK(f.size() == kFrameHeaderSize + encode_payload(m).size() + kFrameTrailerSize);
    const FrameHeader h = decode_frame_header({f.data(), kFrameHeaderSize});
    CHECK(h.type == m.type);
    CHECK(h.round == m.round);
    const RoundMessage d = decode_frame(f);
    CHECK(d.type == m.type);
    CHECK(d.round == m.round);
    CHECK(d.client_id == m.client_id);
    CHECK(d.num_samples == m.num_samples);
    CHECK(d.learning_rate == m.learning_rate);
    CHECK(d.local_epochs == m.local_epochs);
    CHECK(d.metrics == m.metrics);
    CHECK(d.reason == m.reason);
    CHECK(d.params == m.params);
  }
  Bytes f = encode_frame(msgs[0]);
  f[f.size() - 6] ^= 0xFF;
  CHECK_THROWS_AS(decode_frame(f), ChecksumError);
  f = encode_frame(msgs[0]);
  f[0] = 'X';
  CHECK_THROWS_AS(decode_frame(f), FormatError);
  CHECK_THROWS(make_local_update(0, "a", 0, {}, blob));
}

TEST_CASE("in-process transport") {
  auto [a, b] = make_inprocess_pair();
  auto tap = std::make_shared<WireTap>();
  a->attach_tap(tap);
  a->send(make_register("x", 5));
  const RoundMessage m = b->receive();
  CHECK(m.client_id == "x");
  CHECK(tap->frames().size() == 1);
  a->close();
  CHECK_THROWS_AS(b->receive(), ConnectionClosed);
}

TEST_CASE("socket transport") {
  SocketListener listener("127.0.0.1", 0);
  CHECK(listener.port() != 0);
  const Bytes blob = serialize_params(small_model());
  std::thread client([port = listener.port(), &blob] {
    auto c = connect_socket("127.0.0.1", port);
    c->send(make_local_update(2, "sock", 7, {{"train_loss", 1.5}}, blob));
    const RoundMessage reply = c->receive();
    CHECK(reply.type == MessageType::Shutdown);
  });
  auto s = listener.accept(std::chrono::seconds(10));
  const RoundMessage m = s->receive();
  CHECK(m.client_id == "sock");
  CHECK(m.params == blob);
  s->send(make_shutdown(2));
  client.join();
  CHECK_THROWS_AS(s->receive(), ConnectionClosed);
  CHECK_THROWS_AS(listener.accept(std::chrono::milliseconds(50)), ConnectionClosed);
}

}  // TEST_SUITE
