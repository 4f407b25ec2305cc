#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "cyclingnet/pipeline.hpp"
#include "testutil.hpp"

using namespace cyclingnet;
namespace fs = std::filesystem;

TEST_CASE("manifest loading and validation") {
    testutil::TempDir tmp("manifest");
    const fs::path dir = tmp.path() / "clip";
    fs::create_directories(dir);
    for (int t = 0; t < 10; ++t) {
        char name[16];
        std::snprintf(name, sizeof name, "%06d.ppm", t);
        write_image(dir / name, Image(6, 8, 3, 0.5f));
    }
    auto write_manifest = [&](const std::string& line) {
        std::ofstream out(tmp.path() / "m.txt");
        out << "# comment line\n" << line << "\n";
        return tmp.path() / "m.txt";
    };

    SECTION("10 frames with 10 labels are accepted") {
        const auto clips =
            load_manifest(write_manifest("clip_id=c1 dir=clip frames=10 labels=0x6,1x4"));
        REQUIRE(clips.size() == 1);
        CHECK(clips[0].clip_id == "c1");
        CHECK(clips[0].frame_count == 10);
        CHECK(clips[0].labels == std::vector<int>{0, 0, 0, 0, 0, 0, 1, 1, 1, 1});
        CHECK(clips[0].split == Split::train);
    }
    SECTION("label count mismatch is rejected") {
        CHECK_THROWS_AS(
            load_manifest(write_manifest("clip_id=c1 dir=clip frames=10 labels=0x5,1x4")),
            DataError);
    }
    SECTION("unknown field is rejected") {
        CHECK_THROWS_AS(
            load_manifest(
                write_manifest("clip_id=c1 dir=clip frames=10 labels=0x10 camera=gopro")),
            DataError);
    }
    SECTION("missing frame file is reported") {
        CHECK_THROWS_WITH(
            load_manifest(write_manifest("clip_id=c1 dir=clip frames=11 labels=0x11")),
            Catch::Matchers::ContainsSubstring("missing frame 10"));
    }
    SECTION("bad label token is rejected") {
        CHECK_THROWS_AS(
            load_manifest(write_manifest("clip_id=c1 dir=clip frames=10 labels=2x10")),
            DataError);
    }
    SECTION("split tags parse") {
        const auto clips = load_manifest(
            write_manifest("clip_id=c1 dir=clip frames=10 labels=1x10 split=test"));
        CHECK(clips[0].split == Split::test);
    }
}

TEST_CASE("positive rate over the corpus counts") {
    // same fraction as the published corpus: 8,567 of 74,477 frames
    std::vector<ClipManifest> clips(2);
    clips[0].labels.assign(74477 - 8567, 0);
    clips[1].labels.assign(8567, 1);
    CHECK(positive_rate(clips) == Catch::Approx(0.115).margin(0.0005));
}

TEST_CASE("resize_frame") {
    SECTION("2x downsample hits the target extents") {
        const Image big(480, 640, 3, 0.25f);
        const Image out = resize_frame(big, 240, 320);
        CHECK(out.height == 240);
        CHECK(out.width == 320);
        CHECK(out.channels == 3);
    }
    SECTION("constant color is preserved") {
        const Image big(100, 130, 3, 0.63f);
        const Image out = resize_frame(big, 240, 320);
        for (float v : out.data) CHECK(v == Catch::Approx(0.63f).margin(1e-6));
    }
    SECTION("identity resize is exact within 1e-6") {
        Image img(240, 320, 3);
        Rng rng(5);
        for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
        const Image out = resize_frame(img, 240, 320);
        for (std::size_t i = 0; i < img.data.size(); ++i)
            CHECK(out.data[i] == Catch::Approx(img.data[i]).margin(1e-6));
    }
    SECTION("grayscale input is expanded to three channels") {
        const Image gray(50, 60, 1, 0.4f);
        const Image out = resize_frame(gray, 240, 320);
        CHECK(out.channels == 3);
    }
}

TEST_CASE("fusion weights") {
    SECTION("0.8 rgb with 0.4 flows blends to 0.6") {
        const Image rgb(4, 4, 3, 0.8f), flow(4, 4, 3, 0.4f);
        const Image out = fuse_images(rgb, {&flow, &flow, &flow, &flow});
        for (float v : out.data) CHECK(v == Catch::Approx(0.6f).margin(1e-6));
    }
    SECTION("zero flows reduce to rgb/2") {
        Image rgb(4, 4, 3);
        Rng rng(6);
        for (auto& v : rgb.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
        const Image zero(4, 4, 3, 0.0f);
        const Image out = fuse_images(rgb, {&zero, &zero, &zero, &zero});
        for (std::size_t i = 0; i < out.data.size(); ++i)
            CHECK(out.data[i] == rgb.data[i] * 0.5f);
    }
    SECTION("the affine weights sum to one") {
        const Image ones(4, 4, 3, 1.0f);
        const Image out = fuse_images(ones, {&ones, &ones, &ones, &ones});
        for (float v : out.data) CHECK(v == 1.0f);
    }
    SECTION("extent mismatch is rejected") {
        const Image rgb(4, 4, 3, 0.5f), flow(4, 5, 3, 0.5f);
        CHECK_THROWS_AS(fuse_images(rgb, {&flow, &flow, &flow, &flow}),
                        std::invalid_argument);
    }
}

TEST_CASE("augmentation") {
    Image img(12, 16, 3);
    Rng rng(7);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));

    SECTION("horizontal flip is an involution and maps column j to W-1-j") {
        const Image flipped = hflip(img);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    CHECK(flipped.at(y, x, c) == img.at(y, img.width - 1 - x, c));
        const Image twice = hflip(flipped);
        CHECK(twice.data == img.data);  // exact
    }
    SECTION("scale factor 1 is the identity") {
        const Image out = rescale_center(img, 1.0f);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            CHECK(out.data[i] == Catch::Approx(img.data[i]).margin(1e-6));
    }
    SECTION("scaling keeps the extents") {
        for (float f : {0.9f, 1.1f}) {
            const Image out = rescale_center(img, f);
            CHECK(out.height == img.height);
            CHECK(out.width == img.width);
        }
    }
    SECTION("augment leaves the label unchanged") {
        FusedSample s;
        s.x = image_to_tensor(img);
        s.label = 1;
        const FusedSample out = augment(s, AugmentDecision{true, 0.95f});
        CHECK(out.label == 1);
        CHECK(out.x.shape() == s.x.shape());
    }
    SECTION("draw_augment stays inside the documented ranges") {
        Rng r(8);
        for (int i = 0; i < 200; ++i) {
            const AugmentDecision d = draw_augment(true, true, r);
            CHECK(d.scale >= 0.9f);
            CHECK(d.scale <= 1.1f);
        }
    }
}

TEST_CASE("dataset assembly end to end") {
    testutil::TempDir tmp("dataset");
    const auto manifest_path = testutil::write_small_corpus(tmp.path());
    auto clips = load_manifest(manifest_path);
    REQUIRE(clips.size() == 3);
    FlowParams params;
    const fs::path cache = tmp.path() / "cache";

    SECTION("flow caching is idempotent and counts N-1 entries") {
        const auto s1 = ensure_flows(clips[0], cache, params, 24, 32, false);
        CHECK(s1.computed == clips[0].frame_count - 1);
        CHECK(s1.skipped == 0);
        const auto before = [&] {
            std::ifstream in(flow_cache_path(cache, params, clips[0].clip_id, 1),
                             std::ios::binary);
            return std::string((std::istreambuf_iterator<char>(in)), {});
        }();
        const auto s2 = ensure_flows(clips[0], cache, params, 24, 32, false);
        CHECK(s2.computed == 0);
        CHECK(s2.skipped == clips[0].frame_count - 1);
        const auto after = [&] {
            std::ifstream in(flow_cache_path(cache, params, clips[0].clip_id, 1),
                             std::ios::binary);
            return std::string((std::istreambuf_iterator<char>(in)), {});
        }();
        CHECK(before == after);  // identical bytes
    }

    for (const auto& clip : clips) ensure_flows(clip, cache, params, 24, 32, false);
    DatasetBuilder data(clips, cache, params, 24, 32, 4);

    SECTION("truncation rule: per clip usable = frames - 4, none below index 4") {
        CHECK(data.split().train.size() == 10 - 4);
        CHECK(data.split().val.size() == 7 - 4);
        CHECK(data.split().test.size() == 8 - 4);
        for (const auto* list : {&data.split().train, &data.split().val, &data.split().test})
            for (const auto& ref : *list) CHECK(ref.frame_index >= 4);
    }
    SECTION("a 4-frame clip yields no samples") {
        std::vector<ClipManifest> four(1);
        four[0].clip_id = "short";
        four[0].frame_dir = clips[0].frame_dir;
        four[0].frame_count = 4;
        four[0].labels = {0, 0, 0, 0};
        DatasetBuilder d2(four, cache, params, 24, 32, 4);
        CHECK(d2.split().train.empty());
    }
    SECTION("splits are disjoint") {
        std::set<std::pair<std::size_t, std::size_t>> seen;
        for (const auto* list : {&data.split().train, &data.split().val, &data.split().test})
            for (const auto& ref : *list)
                CHECK(seen.insert({ref.clip, ref.frame_index}).second);
    }
    SECTION("verify_cache names the missing clip and frame") {
        fs::remove(flow_cache_path(cache, params, "clip_b", 3));
        CHECK_THROWS_WITH(data.verify_cache(),
                          Catch::Matchers::ContainsSubstring("clip_b") &&
                              Catch::Matchers::ContainsSubstring("3"));
        ensure_flows(clips[1], cache, params, 24, 32, false);
    }
    SECTION("samples are fused composites in range with correct metadata") {
        data.verify_cache();
        const FusedSample s = data.sample(data.split().train[0]);
        CHECK(s.x.shape() == Shape{24, 32, 3});
        CHECK(s.frame_index == 4);
        CHECK(s.clip_id == "clip_a");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            CHECK(s.x[i] >= 0.0f);
            CHECK(s.x[i] <= 1.0f);
        }
    }
    SECTION("shuffling is seeded and reproducible") {
        const auto a = data.shuffled_train(9);
        const auto b = data.shuffled_train(9);
        const auto c = data.shuffled_train(10);
        REQUIRE(a.size() == b.size());
        bool same_ab = true, same_ac = a.size() == c.size();
        for (std::size_t i = 0; i < a.size(); ++i) {
            same_ab = same_ab && a[i].clip == b[i].clip && a[i].frame_index == b[i].frame_index;
            if (same_ac)
                same_ac = a[i].clip == c[i].clip && a[i].frame_index == c[i].frame_index;
        }
        CHECK(same_ab);
        CHECK_FALSE(same_ac);
    }
    SECTION("batches carry labels and respect batch size") {
        data.verify_cache();
        const auto batches = data.batches(data.split().train, 4);
        REQUIRE(batches.size() == 2);
        CHECK(batches[0].x.shape() == Shape{4, 24, 32, 3});
        CHECK(batches[1].x.shape() == Shape{2, 24, 32, 3});
        CHECK(batches[0].labels.size() == 4);
    }
}

TEST_CASE("image file round trip") {
    testutil::TempDir tmp("imageio");
    Image img(5, 7, 3);
    Rng rng(11);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    write_image(tmp.path() / "t.ppm", img);
    const Image back = read_image(tmp.path() / "t.ppm");
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.channels == 3);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        CHECK(back.data[i] == Catch::Approx(img.data[i]).margin(1.0 / 255.0));

    Image gray(4, 4, 1, 0.5f);
    write_image(tmp.path() / "t.pgm", gray);
    CHECK(read_image(tmp.path() / "t.pgm").channels == 1);

    CHECK_THROWS_AS(read_image(tmp.path() / "absent.ppm"), DataError);
    std::ofstream junk(tmp.path() / "junk.ppm", std::ios::binary);
    junk << "P9 4 4 255\n";
    junk.close();
    CHECK_THROWS_AS(read_image(tmp.path() / "junk.ppm"), DataError);
}
