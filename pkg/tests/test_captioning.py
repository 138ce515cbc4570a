"""
Test module for the captioners.

Covers the Azure-backed captioner against a mocked client, the seeded mock
captioner and token lookup.
"""

import os
from unittest.mock import MagicMock, patch

import pytest
from azure.core.exceptions import AzureError

from embroidery_lora.captioning import (
    MOCK_SUBJECTS,
    AzureCaptioner,
    MockCaptioner,
    build_captioner,
    encode_png_data_url,
    get_token_from_env,
)
from embroidery_lora.errors import BackendError, BackendUnavailableError
from embroidery_lora.fixtures import synthetic_embroidery


def _response(text):
    response = MagicMock()
    response.choices = [MagicMock()]
    response.choices[0].message.content = text
    return response


class TestAzureCaptioner:
    """Tests for the AzureCaptioner class."""

    @patch("embroidery_lora.captioning.ChatCompletionsClient")
    def test_init(self, mock_client):
        """Test the initialization of AzureCaptioner."""
        # Arrange
        token = "test_token"

        # Act
        captioner = AzureCaptioner(token)

        # Assert
        assert captioner.model_name == "gpt-4o-mini"
        mock_client.assert_called_once()

    @patch("embroidery_lora.captioning.ChatCompletionsClient")
    def test_caption(self, mock_client):
        """Test that a caption is read from the first choice."""
        # Arrange
        mock_instance = mock_client.return_value
        mock_instance.complete.return_value = _response(" red rose.\n")

        # Act
        captioner = AzureCaptioner("test_token", model_name="vision-model")
        result = captioner.caption(synthetic_embroidery(0))

        # Assert
        assert result == "red rose"
        mock_instance.complete.assert_called_once()
        kwargs = mock_instance.complete.call_args.kwargs
        assert kwargs["model"] == "vision-model"
        assert kwargs["max_tokens"] == 20
        assert len(kwargs["messages"]) == 2

    @patch("embroidery_lora.captioning.ChatCompletionsClient")
    def test_service_error(self, mock_client):
        """Test that SDK errors surface as backend errors."""
        mock_client.return_value.complete.side_effect = AzureError("quota exceeded")

        captioner = AzureCaptioner("test_token")

        with pytest.raises(BackendError, match="quota exceeded"):
            captioner.caption(synthetic_embroidery(0))

    @patch("embroidery_lora.captioning.ChatCompletionsClient")
    def test_empty_completion(self, mock_client):
        """Test that an empty reply is an error, not an empty caption."""
        mock_client.return_value.complete.return_value = _response("")

        with pytest.raises(BackendError, match="empty"):
            AzureCaptioner("test_token").caption(synthetic_embroidery(0))


class TestMockCaptioner:
    """Tests for the offline captioner."""

    def test_deterministic(self):
        """Test that the same seed and image give the same caption."""
        image = synthetic_embroidery(3)
        caption = MockCaptioner(seed=1).caption(image)
        assert caption == MockCaptioner(seed=1).caption(image)
        assert caption in MOCK_SUBJECTS

    def test_data_url(self):
        """Test that images are sent as PNG data URLs."""
        assert encode_png_data_url(synthetic_embroidery(0)).startswith(
            "data:image/png;base64,iVBORw0KGgo"
        )


class TestBuildCaptioner:
    """Tests for the captioner registry."""

    def test_mock(self):
        assert isinstance(build_captioner("mock", seed=2), MockCaptioner)

    def test_unknown(self):
        with pytest.raises(BackendUnavailableError, match="mock"):
            build_captioner("oracle")

    @patch.dict(os.environ, {"GITHUB_TOKEN": "", "AZURE_KEY": ""})
    def test_azure_without_token(self):
        """Test that the Azure captioner needs a token."""
        with pytest.raises(BackendUnavailableError, match="GITHUB_TOKEN"):
            build_captioner("azure")

    @patch.dict(os.environ, {"GITHUB_TOKEN": "test_github_token"})
    @patch("embroidery_lora.captioning.ChatCompletionsClient")
    def test_azure_with_token(self, mock_client):
        captioner = build_captioner("azure", model_name="vision-model")
        assert isinstance(captioner, AzureCaptioner)
        assert captioner.model_name == "vision-model"


class TestUtilities:
    """Tests for utility functions."""

    @patch.dict(os.environ, {"GITHUB_TOKEN": "test_github_token"})
    def test_get_token_from_env_github(self):
        """Test getting GitHub token from environment variables."""
        token = get_token_from_env()
        assert token == "test_github_token"

    @patch.dict(os.environ, {"AZURE_KEY": "test_azure_key", "GITHUB_TOKEN": ""})
    def test_get_token_from_env_azure(self):
        """Test getting Azure key from environment variables."""
        token = get_token_from_env()
        assert token == "test_azure_key"

    @patch.dict(os.environ, {"GITHUB_TOKEN": "", "AZURE_KEY": ""})
    def test_get_token_from_env_none(self):
        """Test getting token when none exists in environment variables."""
        token = get_token_from_env()
        assert token is None
