// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <memory>

#include <gtest/gtest.h>

#include "caspr/error.hpp"

using namespace caspr;

TEST(Errors, KindsAndExitCodes) {
  const std::vector<std::tuple<std::shared_ptr<Error>, std::string, int>> cases = {
      {std::make_shared<ParseError>("x", 4), "ParseError", 2},
      {std::make_shared<SchemaMismatch>("x"), "SchemaMismatch", 3},
      {std::make_shared<NumericError>("x"), "NumericError", 4},
      {std::make_shared<IoError>("x"), "IoError", 5},
      {std::make_shared<TruncatedFile>("x"), "TruncatedFile", 5},
      {std::make_shared<BadMagic>("x"), "BadMagic", 5},
      {std::make_shared<VersionMismatch>("x"), "VersionMismatch", 5},
      {std::make_shared<ConfigError>("x"), "ConfigError", 1},
      {std::make_shared<EmptyDataset>("x"), "EmptyDataset", 1},
      {std::make_shared<LabelError>("x"), "LabelError", 1},
      {std::make_shared<CaseError>("x"), "CaseError", 1},
  };
  for (const auto& [e, kind, code] : cases) {
    EXPECT_EQ(e->kind(), kind);
    EXPECT_EQ(e->exit_code(), code) << kind;
  }
}

TEST(Errors, ParseErrorCarriesRow) {
  ParseError e("bad number", 7);
  EXPECT_EQ(e.row(), 7u);
  EXPECT_STREQ(e.what(), "row 7: bad number");
  EXPECT_EQ(ParseError("header").row(), ParseError::npos);
}
