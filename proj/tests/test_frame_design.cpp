#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "sae/sae.hpp"

using namespace sae;
using oracle::unit;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "sae_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

}  // namespace

TEST(Frame, LoadsValidRows) {
  const auto p = scratch("two_rows.csv");
  write_text(p, "id,ind,sc,wp,tax1,tto\na,A,1,1,10,11\nb,A,3,7,50,40.5\n");
  const Population pop = load_population(p);
  ASSERT_EQ(pop.size(), 2u);
  EXPECT_EQ(pop.domain_count(), 1u);
  ASSERT_EQ(pop.strata().size(), 2u);
  EXPECT_EQ(pop.strata()[0].units.size(), 1u);
  EXPECT_EQ(pop.strata()[1].key.sc, 3);
}

TEST(Frame, RejectsDuplicateIdNamingIt) {
  const auto p = scratch("dup.csv");
  write_text(p, "id,ind,sc,wp,tax1,tto\nx1,A,1,1,10,11\nx1,A,1,1,10,12\n");
  try {
    load_population(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos);
  }
}

TEST(Frame, RejectsBandMismatch) {
  const auto p = scratch("band.csv");
  write_text(p, "id,ind,sc,wp,tax1,tto\na,A,2,7,10,11\n");
  try {
    load_population(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Frame, RejectsMissingColumnAndBadNumbers) {
  const auto a = scratch("nocol.csv");
  write_text(a, "id,ind,sc,wp,tax1\na,A,1,1,10\n");
  EXPECT_THROW(load_population(a), DataError);
  const auto b = scratch("nan.csv");
  write_text(b, "id,ind,sc,wp,tax1,tto\na,A,1,1,ten,11\n");
  EXPECT_THROW(load_population(b), DataError);
  const auto c = scratch("wp50.csv");
  write_text(c, "id,ind,sc,wp,tax1,tto\na,A,5,50,10,11\n");
  EXPECT_THROW(load_population(c), DataError);
}

TEST(Frame, DomainTotals) {
  const Population pop({unit("a", "A", 1, 1, 1, 3), unit("b", "A", 1, 1, 1, 4), unit("c", "B", 1, 1, 1, 10)});
  EXPECT_EQ(domain_total(pop, Variable::tto, "A"), 7.0);
  EXPECT_THROW(domain_total(pop, Variable::tto, "Z"), DataError);
  EXPECT_EQ(domain_total(pop, Variable::tto, "A") + domain_total(pop, Variable::tto, "B"), population_total(pop, Variable::tto));
}

TEST(Frame, PartitionIdentityOnGeneratedFrame) {
  PopGenConfig cfg;
  cfg.N = 3000;
  cfg.domains = 6;
  const auto pop = generate_population(cfg).population;
  for (Variable v : {Variable::tto, Variable::tax1}) {
    double s = 0.0;
    for (const auto& d : pop.domains()) s += domain_total(pop, v, d);
    EXPECT_NEAR(s, population_total(pop, v), 1e-9 * std::abs(population_total(pop, v)));
  }
}

TEST(Frame, CsvRoundTrip) {
  PopGenConfig cfg;
  cfg.N = 1500;
  cfg.domains = 4;
  cfg.gross_outliers = 1;
  const auto pop = generate_population(cfg).population;
  const auto p = scratch("roundtrip.csv");
  write_population(pop, p);
  EXPECT_TRUE(load_population(p) == pop);
}

TEST(Frame, SampleRoundTripAndChecks) {
  PopGenConfig cfg;
  cfg.N = 1500;
  cfg.domains = 4;
  cfg.gross_outliers = 1;
  const auto pop = std::make_shared<const Population>(generate_population(cfg).population);
  const auto design = build_design(*pop, default_allocation(*pop));
  const Sample s = draw_sample(design, pop, 3);
  const auto p = scratch("sample.csv");
  write_sample(s, p);
  const Sample back = load_sample(p, pop);
  EXPECT_EQ(back.parent_index(), s.parent_index());
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(back[k].d, 1.0 / back[k].pi);
}

TEST(Design, InclusionProbabilityAndTakeAll) {
  std::vector<Unit> units;
  for (int i = 0; i < 50; ++i) units.push_back(unit("a" + std::to_string(i), "A", 1, 1, 1, 1));
  for (int i = 0; i < 3; ++i) units.push_back(unit("b" + std::to_string(i), "A", 2, 2, 1, 1));
  const auto pop = std::make_shared<const Population>(units);
  const DesignSpec d = build_design(*pop, {{{"A", 1}, 5}, {{"A", 2}, 3}});
  EXPECT_DOUBLE_EQ(d.strata[0].pi(), 0.1);
  EXPECT_DOUBLE_EQ(1.0 / d.strata[0].pi(), 10.0);
  EXPECT_TRUE(d.strata[1].take_all);
  EXPECT_DOUBLE_EQ(d.strata[1].pi(), 1.0);
  EXPECT_TRUE(d.warnings.empty());

  const DesignSpec clipped = build_design(*pop, {{{"A", 1}, 5}, {{"A", 2}, 7}});
  EXPECT_EQ(clipped.strata[1].sample_size, 3u);
  EXPECT_TRUE(clipped.strata[1].take_all);
  EXPECT_EQ(clipped.warnings.size(), 1u);
}

TEST(Design, RejectsBadAllocations) {
  const auto pop = std::make_shared<const Population>(std::vector<Unit>{unit("a", "A", 1, 1, 1, 1), unit("b", "A", 1, 1, 1, 1)});
  EXPECT_THROW(build_design(*pop, {{{"A", 1}, 0}}), DataError);
  EXPECT_THROW(build_design(*pop, {{{"A", 1}, 1}, {{"B", 1}, 1}}), DataError);
  EXPECT_THROW(build_design(*pop, {}), DataError);
}

TEST(Design, DrawIsDeterministicAndStratified) {
  PopGenConfig cfg;
  cfg.N = 2000;
  cfg.domains = 5;
  const auto pop = std::make_shared<const Population>(generate_population(cfg).population);
  const auto design = build_design(*pop, default_allocation(*pop));
  const Sample a = draw_sample(design, pop, 42), b = draw_sample(design, pop, 42);
  EXPECT_EQ(sample_csv(a), sample_csv(b));
  EXPECT_EQ(a.size(), design.total_sample_size());
  for (std::size_t h = 0; h < design.strata.size(); ++h) {
    const auto& ds = design.strata[h];
    EXPECT_EQ(static_cast<std::size_t>(a.stratum_counts().at(ds.key)), ds.sample_size);
    double wsum = 0.0;
    for (const Unit& u : a.units())
      if (u.sc == ds.key.sc && pop->require_domain(u.ind) == ds.key.domain) wsum += u.d;
    if (ds.take_all) EXPECT_NEAR(wsum, static_cast<double>(ds.population_size), 1e-9);
  }
}

TEST(Design, TakeAllStratumInEveryDraw) {
  std::vector<Unit> units;
  for (int i = 0; i < 40; ++i) units.push_back(unit("a" + std::to_string(i), "A", 1, 1, 1, 1));
  for (int i = 0; i < 4; ++i) units.push_back(unit("b" + std::to_string(i), "A", 5, 20, 1, 1));
  const auto pop = std::make_shared<const Population>(units);
  const auto design = build_design(*pop, {{{"A", 1}, 4}, {{"A", 5}, 4}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Sample s = draw_sample(design, pop, mix_seed(9, seed));
    int big = 0;
    for (const Unit& u : s.units()) big += u.sc == 5;
    EXPECT_EQ(big, 4);
  }
}

TEST(Design, InclusionFrequencyWithinThreeStandardErrors) {
  std::vector<Unit> units;
  for (int i = 0; i < 50; ++i) units.push_back(unit("u" + std::to_string(i), "A", 1, 1, 1, 1));
  const auto pop = std::make_shared<const Population>(units);
  const auto design = build_design(*pop, {{{"A", 1}, 5}});
  std::vector<int> hits(50, 0);
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const Sample s = draw_sample(design, pop, mix_seed(1, static_cast<std::uint64_t>(k)));
    for (std::size_t i : s.parent_index()) ++hits[i];
  }
  const double se = std::sqrt(0.1 * 0.9 / draws);
  for (int h : hits) EXPECT_LE(std::abs(h / static_cast<double>(draws) - 0.1), 3.0 * se + 1e-12);
}

TEST(Design, AllocationCsvRoundTrip) {
  const Allocation a = {{{"A", 1}, 5}, {{"B", 3}, 2}};
  const auto p = scratch("alloc.csv");
  write_text(p, allocation_csv(a));
  EXPECT_EQ(load_allocation(p), a);
}
