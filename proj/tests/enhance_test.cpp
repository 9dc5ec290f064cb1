#include <gtest/gtest.h>

#include "stgl/enhance.hpp"
#include "stgl/error.hpp"
#include "stgl/rng.hpp"

using namespace stgl;

TEST(ContrastEnhance, ConstantImageUnchanged) {
    Image img(1, 5, 5, 0.4);
    for (double f : {0.5, 1.0, 3.0, 10.0}) EXPECT_EQ(contrast_enhance(img, f).data, img.data);
}

TEST(ContrastEnhance, StretchAndClip) {
    Image img(1, 1, 4);
    img.data = {0.4, 0.6, 0.1, 0.9}; // mean 0.5
    const auto out = contrast_enhance(img, 3.0);
    EXPECT_NEAR(out.data[0], 0.2, 1e-12);
    EXPECT_NEAR(out.data[1], 0.8, 1e-12);
    EXPECT_EQ(out.data[2], 0.0);
    EXPECT_EQ(out.data[3], 1.0);
}

TEST(ContrastEnhance, Properties) {
    Rng rng(11);
    Image img(1, 16, 16);
    for (auto& v : img.data) v = 0.45 + 0.05 * rng.uniform();
    EXPECT_EQ(contrast_enhance(img, 1.0).data, img.data);
    const auto out = contrast_enhance(img, 3.0);
    EXPECT_NEAR(out.mean(), img.mean(), 1e-9);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        for (std::size_t j = 0; j < img.data.size(); ++j)
            if (img.data[i] <= img.data[j]) ASSERT_LE(out.data[i], out.data[j]);
}

TEST(ContrastEnhance, Errors) {
    Image img(1, 2, 2, 0.5);
    EXPECT_THROW(contrast_enhance(img, 0.0), InputError);
    img.data[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(contrast_enhance(img, 3.0), InputError);
}

TEST(ContrastEnhance, ThermalSideOfPairsOnlyWhenEnabled) {
    PairedCrop p;
    p.satellite.image = Image(3, 1, 2, 0.3);
    p.thermal.image = Image(1, 1, 2);
    p.thermal.image.data = {0.4, 0.6};
    std::vector<PairedCrop> pairs{p};
    enhance_thermal(pairs, {false, 3.0});
    EXPECT_EQ(pairs[0].thermal.image.data, p.thermal.image.data);
    enhance_thermal(pairs, {true, 3.0});
    EXPECT_NEAR(pairs[0].thermal.image.data[1], 0.8, 1e-12);
    EXPECT_EQ(pairs[0].satellite.image.data, p.satellite.image.data);
}
