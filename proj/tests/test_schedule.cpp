#include <gtest/gtest.h>

#include "toddler/schedule.hpp"

using namespace toddler;

TEST(Schedule, LinearEndpointHasZeroSnr) {
  const auto s = make_schedule(ScheduleKind::linear, 10, 1.0);
  EXPECT_EQ(s.alpha[10], 0.0);
  EXPECT_EQ(snr(s, 10), 0.0);
  EXPECT_EQ(snr(s, 0), kInfiniteSnr);
  EXPECT_DOUBLE_EQ(snr(s, 5), 1.0);
}

TEST(Schedule, BridgeVariancePeaksAtMidpoint) {
  const auto s = make_schedule(ScheduleKind::bridge, 10, 1.0);
  EXPECT_DOUBLE_EQ(s.alpha[5], 0.5);
  EXPECT_DOUBLE_EQ(s.sigma2[5], 0.25);
  for (int T : {1, 2, 7, 10, 200}) {
    const auto b = make_schedule(ScheduleKind::bridge, T, 1.0);
    EXPECT_EQ(b.sigma2[0], 0.0);
    EXPECT_EQ(b.sigma2[T], 0.0);
  }
}

TEST(Schedule, BridgePeakScaling) {
  const auto s = make_schedule(ScheduleKind::bridge, 10, 0.5, 2.0);
  EXPECT_DOUBLE_EQ(s.sigma2[5], 0.25 * 0.5 * 2.0);
  EXPECT_TRUE(validate(s).empty());
}

TEST(Schedule, LinearIdentityHoldsExactly) {
  for (double peak : {0.05, 0.3, 1.0}) {
    const auto s = make_schedule(ScheduleKind::linear, 200, peak);
    for (int t = 0; t <= 200; ++t) EXPECT_NEAR(s.sigma2[t] + peak * s.alpha[t], peak, 1e-12);
  }
}

TEST(Schedule, BridgeSymmetricAboutMidpoint) {
  const auto s = make_schedule(ScheduleKind::bridge, 100, 1.0);
  for (int t = 0; t <= 100; ++t) {
    const double a = s.alpha[t];
    const double mirrored = (1.0 - a) - (1.0 - a) * (1.0 - a);
    EXPECT_NEAR(s.sigma2[t], mirrored, 1e-12);
    EXPECT_NEAR(s.sigma2[t], s.sigma2[100 - t], 1e-12);
  }
}

TEST(Schedule, SnrNonIncreasingForAllKinds) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::log, ScheduleKind::bridge, ScheduleKind::ddpm_linear})
    for (int T : {1, 5, 10, 100, 1000}) {
      const auto s = make_schedule(kind, T, kind == ScheduleKind::linear ? 0.05 : 1.0);
      for (int t = 1; t <= T; ++t) EXPECT_LE(snr(s, t), snr(s, t - 1)) << to_string(kind) << " T=" << T << " t=" << t;
    }
}

TEST(Schedule, DdpmCumulativeProductAndZeroTerminalSnr) {
  const auto s = make_schedule(ScheduleKind::ddpm_linear, 1000);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= s.alpha[t];
    EXPECT_NEAR(prod, s.alphabar[t], 1e-12);
  }
  EXPECT_EQ(snr(s, 1000), 0.0);
  // First step keeps the standard beta_1 = 1e-4.
  EXPECT_NEAR(s.alphabar[1], 1.0 - 1e-4, 1e-15);
}

TEST(Schedule, LogKindIsNormalized) {
  const auto s = make_schedule(ScheduleKind::log, 20, 1.0);
  EXPECT_EQ(s.alpha[0], 1.0);
  EXPECT_EQ(s.alpha[20], 0.0);
  EXPECT_NEAR(s.alpha[3], 1.0 - std::log(4.0) / std::log(21.0), 1e-15);
}

TEST(Schedule, MadeSchedulesValidate) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::log, ScheduleKind::bridge, ScheduleKind::ddpm_linear})
    for (int T : {1, 2, 10, 100, 1000})
      for (double peak : {0.05, 1.0}) {
        const auto s = make_schedule(kind, T, peak);
        const auto issues = validate(s);
        EXPECT_TRUE(issues.empty()) << to_string(kind) << " T=" << T << ": " << (issues.empty() ? "" : issues[0]);
      }
}

TEST(Schedule, ValidateReportsViolations) {
  auto s = make_schedule(ScheduleKind::linear, 10, 1.0);
  s.alpha[3] = s.alpha[2] + 0.01;
  auto issues = validate(s);
  ASSERT_FALSE(issues.empty());
  EXPECT_NE(issues[0].find("decreasing"), std::string::npos);

  auto n = make_schedule(ScheduleKind::linear, 10, 1.0);
  n.sigma2[5] = -0.1;
  issues = validate(n);
  bool found = false;
  for (const auto& i : issues) found |= i.find("negative") != std::string::npos;
  EXPECT_TRUE(found);
}

TEST(Schedule, Errors) {
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 0, 1.0), Error);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 10, 0.0), Error);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 10, -1.0), Error);
  const auto s = make_schedule(ScheduleKind::linear, 10, 1.0);
  EXPECT_THROW(snr(s, 11), Error);
  EXPECT_THROW(snr(s, -1), Error);
}

TEST(Schedule, CsvHasOneRowPerStep) {
  const auto csv = schedule_csv(make_schedule(ScheduleKind::linear, 4, 1.0));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(csv.rfind("t,alpha,sigma2,snr\n", 0), 0u);
  EXPECT_NE(csv.find("0,1,0,inf"), std::string::npos);
}
