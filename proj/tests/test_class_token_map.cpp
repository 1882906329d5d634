#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "genood/class_token_map.hpp"
#include "genood/errors.hpp"
#include "genood/tokenizer.hpp"

using namespace genood;

namespace {

std::vector<int> bytes(const std::string& s) { return toylm::byte_tokenize(s); }

}  // namespace

TEST_CASE("first byte of each name is its token") {
  const auto map = ClassTokenMap::build({"positive", "negative"}, bytes);
  REQUIRE(map.size() == 2);
  CHECK(map.token_ids() == std::vector<int>{'p', 'n'});
  CHECK(map.target_names() == std::vector<std::string>{"positive", "negative"});
  CHECK(map.renames().empty());
}

TEST_CASE("shared first token is a collision") {
  try {
    ClassTokenMap::build({"positive", "position"}, bytes);
    FAIL("expected CollisionError");
  } catch (const CollisionError& e) {
    REQUIRE(e.groups().size() == 1);
    CHECK(e.groups()[0] == std::vector<std::string>{"positive", "position"});
    CHECK(std::string(e.what()).find("positive") != std::string::npos);
  }
}

TEST_CASE("every colliding group is reported") {
  try {
    ClassTokenMap::build({"apple", "avocado", "banana", "berry", "cherry"}, bytes);
    FAIL("expected CollisionError");
  } catch (const CollisionError& e) {
    CHECK(e.groups().size() == 2);
  }
}

TEST_CASE("a rename resolves the collision") {
  const auto map =
      ClassTokenMap::build({"positive", "position"}, bytes, {{"position", "location"}});
  CHECK(map.token_ids() == std::vector<int>{'p', 'l'});
  CHECK(map.entries()[1].original == "position");
  CHECK(map.entries()[1].name == "location");
  REQUIRE(map.renames().size() == 1);
  CHECK(map.renames()[0] == std::pair<std::string, std::string>{"position", "location"});
}

TEST_CASE("a rename onto a taken token still collides") {
  CHECK_THROWS_AS(
      ClassTokenMap::build({"positive", "negative"}, bytes, {{"negative", "pessimistic"}}),
      CollisionError);
}

TEST_CASE("invalid inputs") {
  CHECK_THROWS_AS(ClassTokenMap::build({}, bytes), EmptyInputError);
  CHECK_THROWS_AS(ClassTokenMap::build({"a", "a"}, bytes), ConfigError);
  CHECK_THROWS_AS(ClassTokenMap::build({"a"}, bytes, {{"zzz", "b"}}), ConfigError);
  CHECK_THROWS_AS(ClassTokenMap::build({"a", ""}, bytes), ConfigError);
}
