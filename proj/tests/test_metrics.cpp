#include <filesystem>

#include "catch_amalgamated.hpp"
#include "rawpipe/metrics.hpp"
#include "test_util.hpp"

using namespace rawpipe;

TEST_CASE("accumulate: diagonal growth, ignore pixels, hand-counted case") {
    ConfusionMatrix cm(2);
    LabelMap truth(2, 2), pred(2, 2);
    truth.v = {0, 0, 1, 1};
    pred.v = {0, 1, 1, 1};
    accumulate(cm, pred, truth);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 0) == 0);
    CHECK(cm.at(1, 1) == 2);

    ConfusionMatrix all_ignored(2);
    LabelMap ign(2, 2, kIgnoreLabel);
    accumulate(all_ignored, pred, ign);
    CHECK(all_ignored.total() == 0);

    ConfusionMatrix diag(3);
    LabelMap same = testutil::random_labels(4, 4, 3, 5);
    accumulate(diag, same, same);
    std::int64_t d = 0;
    for (int c = 0; c < 3; ++c) d += diag.at(c, c);
    CHECK(d == 16);
    CHECK(diag.total() == 16);

    LabelMap bad(2, 2, 7);
    ConfusionMatrix cm2(2);
    CHECK_THROWS_AS(accumulate(cm2, bad, truth), ConfigError);
}

TEST_CASE("miou: identity, hand case and absent-class exclusion") {
    ConfusionMatrix ident(3);
    ident.at(0, 0) = 5;
    ident.at(1, 1) = 2;
    ident.at(2, 2) = 9;
    CHECK(miou(ident).mean_iou == 1.0);

    ConfusionMatrix cm(2);
    cm.at(0, 0) = 1;
    cm.at(0, 1) = 1;
    cm.at(1, 1) = 2;
    auto r = miou(cm);
    CHECK(r.per_class[0] == Catch::Approx(0.5).epsilon(1e-15));
    CHECK(r.per_class[1] == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.mean_iou == Catch::Approx(7.0 / 12.0).epsilon(1e-15));

    ConfusionMatrix with_absent(3);
    with_absent.at(0, 0) = 1;
    with_absent.at(0, 1) = 1;
    with_absent.at(1, 1) = 2;  // class 2 fully absent
    auto r2 = miou(with_absent);
    CHECK_FALSE(r2.class_present[2]);
    CHECK(r2.mean_iou == Catch::Approx(7.0 / 12.0).epsilon(1e-15));

    ConfusionMatrix empty(2);
    CHECK_THROWS_AS(miou(empty), ConfigError);
}

TEST_CASE("pixel_acc: identity, hand case, all-wrong") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 1;
    cm.at(0, 1) = 1;
    cm.at(1, 1) = 2;
    CHECK(pixel_acc(cm) == Catch::Approx(0.75).epsilon(1e-15));

    ConfusionMatrix wrong(2);
    wrong.at(0, 1) = 3;
    wrong.at(1, 0) = 4;
    CHECK(pixel_acc(wrong) == 0.0);

    ConfusionMatrix empty(2);
    CHECK_THROWS_AS(pixel_acc(empty), ConfigError);
}

TEST_CASE("metrics: consistent label permutation permutes IoU and preserves the mean") {
    LabelMap truth = testutil::random_labels(8, 8, 3, 21);
    LabelMap pred = testutil::random_labels(8, 8, 3, 22);
    ConfusionMatrix cm(3);
    accumulate(cm, pred, truth);
    auto base = miou(cm);

    const int perm[3] = {2, 0, 1};
    LabelMap truth_p = truth, pred_p = pred;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        truth_p.v[i] = perm[truth.v[i]];
        pred_p.v[i] = perm[pred.v[i]];
    }
    ConfusionMatrix cmp(3);
    accumulate(cmp, pred_p, truth_p);
    auto permuted = miou(cmp);
    CHECK(permuted.mean_iou == Catch::Approx(base.mean_iou).epsilon(1e-15));
    for (int c = 0; c < 3; ++c)
        CHECK(permuted.per_class[std::size_t(perm[c])] ==
              Catch::Approx(base.per_class[std::size_t(c)]).epsilon(1e-15));
    CHECK(pixel_acc(cmp) == Catch::Approx(pixel_acc(cm)).epsilon(1e-15));
}

TEST_CASE("metrics: accumulation is order independent") {
    std::vector<LabelMap> truths, preds;
    for (int i = 0; i < 5; ++i) {
        truths.push_back(testutil::random_labels(6, 6, 4, 100 + std::uint64_t(i)));
        preds.push_back(testutil::random_labels(6, 6, 4, 200 + std::uint64_t(i)));
    }
    ConfusionMatrix fwd(4), rev(4);
    for (int i = 0; i < 5; ++i) accumulate(fwd, preds[std::size_t(i)], truths[std::size_t(i)]);
    for (int i = 4; i >= 0; --i) accumulate(rev, preds[std::size_t(i)], truths[std::size_t(i)]);
    for (int t = 0; t < 4; ++t)
        for (int p = 0; p < 4; ++p) CHECK(fwd.at(t, p) == rev.at(t, p));
}

TEST_CASE("metrics: report files are written") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "rawpipe_metrics_test";
    fs::create_directories(dir);
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 10;
    cm.at(1, 1) = 4;
    cm.at(1, 0) = 2;
    cm.at(2, 2) = 6;
    write_report_csv((dir / "report.csv").string(), cm);
    write_report_png((dir / "report.png").string(), cm);
    CHECK(fs::exists(dir / "report.csv"));
    CHECK(fs::file_size(dir / "report.csv") > 0);
    ImageU8 img = png_read((dir / "report.png").string());
    CHECK(img.channels == 3);
    CHECK(img.w > 0);
    fs::remove_all(dir);
}
