#include <catch2/catch_amalgamated.hpp>

#include "didipose/dataset.hpp"
#include "didipose/observation.hpp"
#include "didipose/skeleton.hpp"

using namespace didipose;

TEST_CASE("default skeleton validates and is a proper tree") {
    const auto skel = SkeletonDef::default_h36m17();
    REQUIRE(skel.joint_count == 17);
    REQUIRE(skel.parent[0] == -1);
    for (int j = 1; j < skel.joint_count; ++j) {
        REQUIRE(skel.parent[static_cast<std::size_t>(j)] >= 0);
        REQUIRE(skel.parent[static_cast<std::size_t>(j)] < j);
        REQUIRE(skel.bone_length_mm[static_cast<std::size_t>(j)] > 0.0);
    }
}

TEST_CASE("invalid skeletons are rejected") {
    auto skel = SkeletonDef::default_h36m17();
    SECTION("non-root parent of joint 0") {
        skel.parent[0] = 3;
        REQUIRE_THROWS_AS(skel.validate(), ConfigError);
    }
    SECTION("forward parent reference breaks the tree order") {
        skel.parent[2] = 5;
        REQUIRE_THROWS_AS(skel.validate(), ConfigError);
    }
    SECTION("nonpositive bone length") {
        skel.bone_length_mm[4] = 0.0;
        REQUIRE_THROWS_AS(skel.validate(), ConfigError);
    }
    SECTION("inverted angle limits") {
        skel.angle_min[3][1] = 1.0;
        skel.angle_max[3][1] = -1.0;
        REQUIRE_THROWS_AS(skel.validate(), ConfigError);
    }
}

TEST_CASE("collapsed angle ranges give the unique rest pose for every seed") {
    const auto skel = SkeletonDef::default_h36m17(0.0);
    Rng r1(1), r2(99999);
    const Pose a = generate_pose(skel, r1);
    const Pose b = generate_pose(skel, r2);
    REQUIRE(a.coords_mm == b.coords_mm);
    // rest pose: joint 1 (right hip) sits at -x of the pelvis by its bone length
    REQUIRE(a.at(1, 0) == Catch::Approx(-132.0).margin(1e-9));
    REQUIRE(a.at(1, 1) == Catch::Approx(0.0).margin(1e-9));
    // spine chain runs straight up
    REQUIRE(a.at(7, 1) == Catch::Approx(230.0).margin(1e-9));
    REQUIRE(a.at(8, 1) == Catch::Approx(230.0 + 255.0).margin(1e-9));
}

TEST_CASE("generation is deterministic for a fixed seed and draw index") {
    const auto skel = SkeletonDef::default_h36m17();
    Rng a = Rng(42).fork(0);
    Rng b = Rng(42).fork(0);
    const Pose pa = generate_pose(skel, a);
    const Pose pb = generate_pose(skel, b);
    REQUIRE(pa.coords_mm == pb.coords_mm);  // byte-identical
    Rng c = Rng(43).fork(0);
    REQUIRE(generate_pose(skel, c).coords_mm != pa.coords_mm);
}

TEST_CASE("bone lengths from forward kinematics match the table") {
    const auto skel = SkeletonDef::default_h36m17();
    const Rng base(7);
    for (int i = 0; i < 2000; ++i) {
        Rng rng = base.fork(static_cast<std::uint64_t>(i));
        const Pose p = generate_pose(skel, rng);
        REQUIRE(p.at(0, 0) == 0.0);
        REQUIRE(p.at(0, 1) == 0.0);
        REQUIRE(p.at(0, 2) == 0.0);
        REQUIRE(p.all_finite());
        REQUIRE(max_bone_length_error(p, skel) < 1e-6);
    }
}

TEST_CASE("projection and occlusion masks") {
    const auto skel = SkeletonDef::default_h36m17();
    Rng rng(3);
    const Pose p = generate_pose(skel, rng);

    SECTION("zero-area occluder leaves everything visible") {
        const auto obs = project_with_rect(p, Rect{10.0, 10.0, 10.0, 10.0});
        for (auto v : obs.visible) REQUIRE(v == 1);
        REQUIRE(occluded_fraction(obs) == 0.0);
    }
    SECTION("plane-covering occluder hides everything") {
        const auto obs = project_with_rect(p, Rect::everything());
        for (auto v : obs.visible) REQUIRE(v == 0);
        REQUIRE(occluded_fraction(obs) == 1.0);
    }
    SECTION("half-plane x>0 hides exactly the joints with x>0") {
        const double big = 1e18;
        const auto obs = project_with_rect(p, Rect{0.0, -big, big, big});
        for (int j = 0; j < p.joints; ++j)
            REQUIRE((obs.visible[static_cast<std::size_t>(j)] == 1) == (p.at(j, 0) <= 0.0));
    }
    SECTION("projection takes the x,y components") {
        const auto obs = project_with_rect(p, Rect{});
        for (int j = 0; j < p.joints; ++j) {
            REQUIRE(obs.px(j) == p.at(j, 0));
            REQUIRE(obs.py(j) == p.at(j, 1));
        }
    }
}

TEST_CASE("sampled occluders are deterministic in the seed") {
    const auto skel = SkeletonDef::default_h36m17();
    const OccluderSpec spec{100.0, 400.0, 50.0};
    Rng r1 = Rng(5).fork(3);
    Rng r2 = Rng(5).fork(3);
    const Pose p1 = generate_pose(skel, r1);
    const Pose p2 = generate_pose(skel, r2);
    const auto o1 = project_and_occlude(p1, spec, r1);
    const auto o2 = project_and_occlude(p2, spec, r2);
    REQUIRE(o1.proj2d == o2.proj2d);
    REQUIRE(o1.visible == o2.visible);
    REQUIRE(o1.occluder.x0 == o2.occluder.x0);
}

TEST_CASE("occluder spec validation") {
    REQUIRE_THROWS_AS((OccluderSpec{-1.0, 5.0, 0.0}).validate(), ConfigError);
    REQUIRE_THROWS_AS((OccluderSpec{10.0, 5.0, 0.0}).validate(), ConfigError);
    REQUIRE_NOTHROW((OccluderSpec{0.0, 0.0, 0.0}).validate());
}
