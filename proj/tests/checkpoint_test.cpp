// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "aligndesk/checkpoint.hpp"
#include "aligndesk/ndgrad/params.hpp"

namespace aligndesk {
namespace {

CheckpointData sample_data() {
    Rng rng(11);
    CheckpointData c;
    c.meta = {{"step", 42}, {"note", "x"}};
    c.tensors.push_back({"student/a", "param", normal_array<float>({3, 5}, 1.0, rng)});
    c.tensors.push_back({"student/a", "moment1", normal_array<float>({3, 5}, 1.0, rng)});
    c.tensors.push_back({"student/b", "param", normal_array<float>({7}, 1.0, rng)});
    c.tensors.push_back({"empty", "param", Array(Shape{4, 0})});
    std::vector<float> r;
    put_u64(r, 0xFEDCBA9876543210ULL);
    c.tensors.push_back({"train", "rng", Array(Shape{r.size()}, r)});
    return c;
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const CheckpointData c = sample_data();
    const std::string bytes = encode_checkpoint(c);
    EXPECT_EQ(bytes.substr(0, 4), "HSTE");
    const CheckpointData d = decode_checkpoint(bytes);
    EXPECT_EQ(d.meta, c.meta);
    ASSERT_EQ(d.tensors.size(), c.tensors.size());
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
        EXPECT_EQ(d.tensors[i].name, c.tensors[i].name);
        EXPECT_EQ(d.tensors[i].kind, c.tensors[i].kind);
        EXPECT_TRUE(d.tensors[i].value.bit_equal(c.tensors[i].value));
    }
    EXPECT_EQ(get_u64(d.at("train", "rng"), 0), 0xFEDCBA9876543210ULL);
    EXPECT_EQ(encode_checkpoint(d), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
    const std::string bytes = encode_checkpoint(sample_data());
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, 20)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
    std::string ver = bytes;
    ver[4] = 9;
    EXPECT_THROW(decode_checkpoint(ver), FormatError);
    EXPECT_THROW(decode_checkpoint(""), FormatError);
}

TEST(Checkpoint, RejectsBadKindsAndMissingTensors) {
    CheckpointData c;
    c.tensors.push_back({"a", "bogus", Array(Shape{1})});
    EXPECT_THROW(encode_checkpoint(c), ContractError);
    EXPECT_THROW(sample_data().at("nope", "param"), FormatError);
    Array chunk(Shape{4}, std::vector<float>{1.5f, 0, 0, 0});
    EXPECT_THROW(get_u64(chunk, 0), FormatError);
    EXPECT_THROW(get_u64(chunk, 1), FormatError);
}

TEST(Checkpoint, AtomicFileWrite) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "aligndesk_ckpt_test";
    fs::remove_all(dir);
    const fs::path p = dir / "sub" / "c.hste";
    save_checkpoint_file(p, sample_data());
    EXPECT_TRUE(fs::exists(p));
    EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
    const CheckpointData d = load_checkpoint_file(p);
    EXPECT_EQ(d.meta.at("step"), 42);
    EXPECT_THROW(load_checkpoint_file(dir / "missing.hste"), IOError);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace aligndesk
