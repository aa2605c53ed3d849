//! Default prompt templates for the three pipeline stages and their
//! rendering helpers.
//!
//! Templates use three placeholders. `<image>` marks where images
//! accompany the text (they travel as separate payloads on the wire, so
//! the token is stripped from the rendered text). `<information>` in the
//! guesser template receives the serialized reasoning and knowledge
//! block. `{item}` in the searcher template receives the element label
//! under analysis.

pub const REASONER_TEMPLATE: &str = "<image> Given an image, craft a brief and cohesive reasoning path that deduces this location based on the visual clues present in the image. Using a tone of exploration and inference. Carefully analyze and link observations of natural features (climate, vegetation, terrain), man-made structures (roads, buildings, signage), and distinct landmarks. Allow these observations to naturally lead you to the correct country, enhancing the accuracy of your deductions. Start the reasoning without any intro, and make sure to make it brief.";

pub const SEARCHER_TEMPLATE: &str = "<image> Analyze the {item} images to determine the region with the highest likelihood of finding this type of {item}. For each image, provide only the core reasoning in one sentence. Don't say you can't determine, try your best as it's a geo-localization game";

pub const GUESSER_TEMPLATE: &str = "<image> <information> Using the provided information as a reference, estimate the location depicted in the image with as much accuracy and precision as possible. Generally, you might use the reasoning to roughly locate the coarse-grained location, and use other information to help you decide more precisely. Use your own knowledge as well. Aim to deduce the exact coordinates whenever feasible. Format your response strictly as JSON in the following structure:{\"country\": \"<country_name>\", \"city\": \"<city_name>\", \"latitude\": <Latitude Coordinate>, \"longitude\": <Longitude Coordinate>} Ensure the JSON output is correctly formatted. Provide a well-informed estimate for each value, avoiding any empty fields. Do not include additional information or commentary.";

/// Appended to the guesser prompt on the single parse-failure re-prompt.
pub const FORMAT_REMINDER: &str = "Your previous reply could not be parsed. Respond with exactly one JSON object of the form {\"country\": \"<country_name>\", \"city\": \"<city_name>\", \"latitude\": <Latitude Coordinate>, \"longitude\": <Longitude Coordinate>} and nothing else.";

/// Remove `<image>` markers; the images ride alongside as payloads.
pub fn strip_image_token(text: &str) -> String {
    text.replace("<image> ", "").replace("<image>", "").trim().to_string()
}

pub fn render_searcher(template: &str, item: &str) -> String {
    strip_image_token(&template.replace("{item}", item))
}

pub fn render_guesser(template: &str, information: &str) -> String {
    strip_image_token(&template.replace("<information>", information))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn searcher_substitutes_every_item_occurrence() {
        let rendered = render_searcher(SEARCHER_TEMPLATE, "road sign");
        assert!(rendered.contains("Analyze the road sign images"));
        assert!(rendered.contains("this type of road sign"));
        assert!(!rendered.contains("{item}"));
        assert!(!rendered.contains("<image>"));
    }

    #[test]
    fn guesser_receives_the_information_block() {
        let rendered = render_guesser(GUESSER_TEMPLATE, "some reasoning\n[map] a place");
        assert!(rendered.starts_with("some reasoning\n[map] a place Using the provided"));
        assert!(rendered.contains("Format your response strictly as JSON"));
    }

    #[test]
    fn reasoner_template_needs_no_substitution() {
        let stripped = strip_image_token(REASONER_TEMPLATE);
        assert!(stripped.starts_with("Given an image, craft a brief"));
    }
}
