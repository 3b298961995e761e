#include <doctest.h>

#include <fstream>
#include <sstream>

#include "echodx/checkpoint.hpp"
#include "support.hpp"

using namespace echodx;

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit exact") {
    auto net = Network::build(NetworkConfig::desk(), 12);
    const auto dir = testing::scratch_dir("ckpt");
    checkpoint_save(net, dir / "a.ckpt");
    auto back = checkpoint_load(dir / "a.ckpt");
    CHECK(back.config() == net.config());
    CHECK(back.state() == net.state());
    Rng rng(1);
    auto x = testing::random_tensor<float>(NetworkConfig::desk().batch_shape(1), rng, 0, 1);
    CHECK(back.logits(x) == net.logits(x));
  }

  TEST_CASE("load errors are distinct") {
    auto net = Network::build(NetworkConfig::desk(), 12);
    std::ostringstream out;
    write_checkpoint(out, net);
    auto bytes = out.str();
    CHECK(bytes.substr(0, 4) == "R21D");

    auto bad = bytes;
    bad.replace(0, 4, "XXXX");
    std::istringstream bad_in(bad);
    CHECK_THROWS_AS(read_checkpoint(bad_in), BadMagicError);

    std::istringstream cut(bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(read_checkpoint(cut), TruncatedError);

    auto ver = bytes;
    ver[4] = 9;
    std::istringstream ver_in(ver);
    CHECK_THROWS_AS(read_checkpoint(ver_in), UnsupportedVersionError);

    // a different config echo implies different tensor shapes
    auto other = NetworkConfig::desk();
    other.stage_channels = {8, 8, 8, 16};
    std::ostringstream o2;
    write_checkpoint(o2, Network::build(other, 1));
    auto mixed = o2.str().substr(0, 4 + 4 + 4 + 16) + bytes.substr(4 + 4 + 4 + 16);
    std::istringstream mixed_in(mixed);
    CHECK_THROWS_AS(read_checkpoint(mixed_in), CheckpointShapeError);

    CHECK_THROWS_AS(checkpoint_load("/nonexistent/x.ckpt"), IoError);
  }
}
